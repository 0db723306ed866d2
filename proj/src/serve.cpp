// SPDX-License-Identifier: Apache-2.0
#include "ww/serve.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <memory>
#include <optional>
#include <ostream>

#include "ww/steer.hpp"

namespace ww {

using json = nlohmann::json;

namespace {

TokenRecord parse_token(const json& req, const DirectionIndex& index) {
    TokenRecord rec;
    rec.role = role_from_string(req.value("role", std::string("user")));
    if (req.contains("token_id") && !req.at("token_id").is_null()) rec.token_id = req.at("token_id").get<uint32_t>();
    rec.d_model = index.d_model();
    const size_t n = size_t{index.n_layers()} * index.d_model();
    if (req.contains("payload")) {
        const std::string raw = base64_decode(req.at("payload").get<std::string>());
        if (raw.size() != n * sizeof(float))
            throw ShapeError("payload holds " + std::to_string(raw.size() / sizeof(float)) + " values, expected " + std::to_string(n));
        rec.values.resize(n);
        std::memcpy(rec.values.data(), raw.data(), raw.size());
    } else if (req.contains("vectors")) {
        const auto& vs = req.at("vectors");
        if (!vs.is_array() || vs.size() != index.n_layers()) throw ShapeError("vectors must hold one array per layer");
        for (const auto& layer : vs) {
            auto v = layer.get<std::vector<float>>();
            if (v.size() != index.d_model()) throw ShapeError("layer vector length != d_model");
            rec.values.insert(rec.values.end(), v.begin(), v.end());
        }
    } else {
        throw FormatError("token request needs 'payload' or 'vectors'");
    }
    for (float v : rec.values)
        if (!std::isfinite(v)) throw NumericError("non-finite activation in request");
    return rec;
}

void emit(std::ostream& out, const json& j) {
    out << j.dump() << '\n';
    out.flush();
}

} // namespace

std::string token_request(uint64_t seq, const TokenRecord& record) {
    json j = {{"seq", seq}, {"kind", "token"}, {"role", to_string(record.role)},
              {"payload", base64_encode(record.values.data(), record.values.size() * sizeof(float))}};
    if (record.token_id) j["token_id"] = *record.token_id;
    return j.dump();
}

ServeStats serve_stdio(std::istream& in, std::ostream& out, const DirectionIndex& index, MonitorState& state, Mode mode) {
    check_compatible(index, state);
    state.mode = mode;
    ServeStats stats;
    std::unique_ptr<StreamScanner> scanner;
    std::unique_ptr<StreamSteerer> steerer;
    std::optional<uint64_t> last_seq;
    auto reset = [&] {
        scanner.reset();
        steerer.reset();
        if (mode == Mode::steer) steerer = std::make_unique<StreamSteerer>(index, state);
        else scanner = std::make_unique<StreamScanner>(index, state);
        last_seq.reset();
    };
    reset();

    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        ++stats.requests;
        json seq_field = nullptr;
        try {
            json req;
            try {
                req = json::parse(line);
            } catch (const json::exception& e) {
                throw FormatError(std::string("malformed line: ") + e.what());
            }
            if (!req.is_object() || !req.contains("seq") || !req.at("seq").is_number_unsigned())
                throw FormatError("request needs a non-negative integer 'seq'");
            const auto seq = req.at("seq").get<uint64_t>();
            seq_field = seq;
            if (last_seq && seq <= *last_seq)
                throw FormatError("out-of-order seq " + std::to_string(seq) + " (last " + std::to_string(*last_seq) + ")");
            const std::string kind = req.value("kind", std::string("token"));
            if (kind == "end_stream") {
                last_seq = seq;
                const Report& report = steerer ? steerer->report() : scanner->report();
                emit(out, {{"seq", seq}, {"kind", "end_stream"}, {"report", report_to_json(report, state)}});
                ++stats.streams;
                reset();
                continue;
            }
            if (kind != "token") throw FormatError("unknown request kind '" + kind + "'");
            const TokenRecord rec = parse_token(req, index);
            last_seq = seq;
            json events = json::array();
            json resp = {{"seq", seq}};
            if (steerer) {
                const SteerOutcome o = steerer->feed(rec);
                for (const auto& e : o.events) events.push_back(event_to_json(e));
                resp["events"] = std::move(events);
                resp["steered"] = base64_encode(o.record.values.data(), o.record.values.size() * sizeof(float));
            } else {
                for (const auto& e : scanner->feed(rec)) events.push_back(event_to_json(e));
                resp["events"] = std::move(events);
            }
            emit(out, resp);
        } catch (const std::exception& e) {
            ++stats.errors;
            emit(out, {{"seq", seq_field}, {"error", e.what()}});
        }
    }
    return stats;
}

} // namespace ww
