// SPDX-License-Identifier: Apache-2.0
#include "ww/trace.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include <json.hpp>

#include "ww/half.hpp"

namespace ww {

using json = nlohmann::json;

namespace {

constexpr char kMagic[4] = {'W', 'W', 'T', 'R'};
constexpr uint32_t kVersion = 1;

std::string header_json(const TraceHeader& h, uint64_t boundary) {
    json j;
    j["model_id"] = h.model_id;
    j["n_layers"] = h.n_layers;
    j["d_model"] = h.d_model;
    j["dtype"] = h.dtype == TraceDType::f16 ? "f16" : "f32";
    j["prompt_boundary"] = boundary;
    if (!h.notes.empty()) j["notes"] = h.notes;
    return j.dump();
}

void put_u32(std::ostream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}

} // namespace

uint64_t compute_prompt_boundary(std::span<const TokenRecord> tokens) {
    uint64_t n = 0;
    for (const auto& t : tokens) {
        if (t.role == Role::assistant) break;
        ++n;
    }
    return n;
}

void validate_trace(const ActivationTrace& trace) {
    const auto& h = trace.header;
    if (h.n_layers < 1 || h.d_model < 1) throw ShapeError("trace header needs n_layers >= 1 and d_model >= 1");
    const size_t expect = size_t{h.n_layers} * h.d_model;
    for (size_t i = 0; i < trace.tokens.size(); ++i) {
        const auto& t = trace.tokens[i];
        if (t.values.size() != expect || t.d_model != h.d_model)
            throw ShapeError("token " + std::to_string(i) + ": record shape disagrees with header");
        for (float v : t.values)
            if (!std::isfinite(v)) throw NumericError("token " + std::to_string(i) + ": non-finite activation");
        if (t.token_id && *t.token_id == kNoTokenId) throw FormatError("token id 0xFFFFFFFF is reserved");
    }
}

void write_trace(const ActivationTrace& trace, std::ostream& out) {
    validate_trace(trace);
    const auto& h = trace.header;
    const std::string hj = header_json(h, compute_prompt_boundary(trace.tokens));
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<uint32_t>(hj.size()));
    out.write(hj.data(), static_cast<std::streamsize>(hj.size()));

    const size_t n = size_t{h.n_layers} * h.d_model;
    std::vector<uint16_t> half(h.dtype == TraceDType::f16 ? n : 0);
    for (const auto& t : trace.tokens) {
        uint8_t prefix[8];
        prefix[0] = static_cast<uint8_t>(t.role);
        prefix[1] = t.flags;
        prefix[2] = prefix[3] = 0;
        const uint32_t id = t.token_id.value_or(kNoTokenId);
        std::memcpy(prefix + 4, &id, 4);
        out.write(reinterpret_cast<const char*>(prefix), 8);
        if (h.dtype == TraceDType::f32) {
            out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(n * 4));
        } else {
            for (size_t i = 0; i < n; ++i) {
                half[i] = f32_to_f16(t.values[i]);
                if ((half[i] & 0x7c00u) == 0x7c00u) throw NumericError("activation " + std::to_string(t.values[i]) + " overflows f16 storage");
            }
            out.write(reinterpret_cast<const char*>(half.data()), static_cast<std::streamsize>(n * 2));
        }
    }
    if (!out) throw IoError("trace write failed");
}

void write_trace(const ActivationTrace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write trace " + path);
    write_trace(trace, out);
}

TraceReader::TraceReader(const std::string& path, bool multi_segment) : multi_(multi_segment) {
    auto f = std::make_unique<std::ifstream>(path, std::ios::binary);
    if (!*f) throw IoError("cannot open trace " + path);
    in_ = std::move(f);
    char magic[4];
    if (!in_->read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": not a trace file (bad magic)");
    read_header(header_);
}

TraceReader::TraceReader(std::unique_ptr<std::istream> in, bool multi_segment) : in_(std::move(in)), multi_(multi_segment) {
    char magic[4];
    if (!in_->read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a trace stream (bad magic)");
    read_header(header_);
}

void TraceReader::read_header(TraceHeader& h) {
    uint32_t version = 0, len = 0;
    if (!in_->read(reinterpret_cast<char*>(&version), 4) || !in_->read(reinterpret_cast<char*>(&len), 4))
        throw FormatError("truncated trace header");
    if (version != kVersion) throw FormatError("unsupported trace version " + std::to_string(version));
    std::string text(len, '\0');
    if (!in_->read(text.data(), len)) throw FormatError("truncated trace header JSON");
    try {
        const json j = json::parse(text);
        h.model_id = j.at("model_id").get<std::string>();
        h.n_layers = j.at("n_layers").get<uint32_t>();
        h.d_model = j.at("d_model").get<uint32_t>();
        const auto dt = j.at("dtype").get<std::string>();
        if (dt == "f32") h.dtype = TraceDType::f32;
        else if (dt == "f16") h.dtype = TraceDType::f16;
        else throw FormatError("unsupported trace dtype '" + dt + "'");
        if (j.contains("prompt_boundary")) h.prompt_boundary = j.at("prompt_boundary").get<uint64_t>();
        else h.prompt_boundary.reset();
        h.notes = j.value("notes", std::string{});
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed trace header: ") + e.what());
    }
    if (h.n_layers < 1 || h.d_model < 1) throw FormatError("trace header needs n_layers >= 1 and d_model >= 1");
    buf_.resize(size_t{h.n_layers} * h.d_model * (h.dtype == TraceDType::f16 ? 2 : 4));
}

bool TraceReader::next(TokenRecord& record) {
    for (;;) {
        const int c = in_->peek();
        if (c == std::char_traits<char>::eof()) return false;
        if (c != kMagic[0]) break;
        if (!multi_) throw FormatError("segment header after record " + std::to_string(count_) + "; open in multi-segment mode");
        char magic[4];
        if (!in_->read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad segment magic after record " + std::to_string(count_));
        TraceHeader seg;
        read_header(seg);
        if (!seg.compatible(header_)) throw FormatError("segment " + std::to_string(segments_) + " header disagrees with first segment");
        ++segments_;
    }
    const auto truncated = [&] {
        const std::string last = count_ == 0 ? "none" : std::to_string(count_ - 1);
        return FormatError("truncated record " + std::to_string(count_) + " (last complete record: " + last + ")");
    };
    uint8_t prefix[8];
    if (!in_->read(reinterpret_cast<char*>(prefix), 8)) throw truncated();
    if (!in_->read(reinterpret_cast<char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()))) throw truncated();

    record.role = role_from_byte(prefix[0]);
    record.flags = prefix[1];
    uint32_t id;
    std::memcpy(&id, prefix + 4, 4);
    record.token_id = id == kNoTokenId ? std::nullopt : std::optional<uint32_t>(id);
    record.d_model = header_.d_model;
    const size_t n = size_t{header_.n_layers} * header_.d_model;
    record.values.resize(n);
    if (header_.dtype == TraceDType::f32) {
        std::memcpy(record.values.data(), buf_.data(), n * 4);
    } else {
        for (size_t i = 0; i < n; ++i) {
            uint16_t h;
            std::memcpy(&h, buf_.data() + 2 * i, 2);
            record.values[i] = f16_to_f32(h);
        }
    }
    ++count_;
    return true;
}

ActivationTrace read_trace(const std::string& path, bool multi_segment) {
    TraceReader reader(path, multi_segment);
    ActivationTrace trace;
    trace.header = reader.header();
    TokenRecord rec;
    while (reader.next(rec)) trace.tokens.push_back(rec);
    return trace;
}

} // namespace ww
