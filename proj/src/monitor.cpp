// SPDX-License-Identifier: Apache-2.0
#include "ww/monitor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ww/rng.hpp"

namespace ww {

using json = nlohmann::json;

std::string_view to_string(Mode m) {
    switch (m) {
    case Mode::calibrate: return "calibrate";
    case Mode::monitor: return "monitor";
    case Mode::freeze: return "freeze";
    case Mode::steer: return "steer";
    }
    return "?";
}

Mode mode_from_string(std::string_view s) {
    if (s == "calibrate") return Mode::calibrate;
    if (s == "monitor") return Mode::monitor;
    if (s == "freeze") return Mode::freeze;
    if (s == "steer") return Mode::steer;
    throw FormatError("unknown mode '" + std::string(s) + "'");
}

std::string_view to_string(Bound b) {
    return b == Bound::below_min ? "below_min" : "above_max";
}

std::string_view to_string(Phase p) {
    return p == Phase::prompt ? "prompt" : "completion";
}

namespace {

template <typename U>
double cosine_impl(std::span<const float> a, std::span<const U> u, bool* zero) {
    if (a.size() != u.size()) throw ShapeError("cosine: length mismatch");
    double dot = 0.0, norm2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double x = a[i];
        dot += x * static_cast<double>(u[i]);
        norm2 += x * x;
    }
    if (zero) *zero = norm2 == 0.0;
    if (norm2 == 0.0) return 0.0;
    return std::clamp(dot / std::sqrt(norm2), -1.0, 1.0);
}

} // namespace

double cosine(std::span<const float> a, std::span<const float> u, bool* zero) {
    return cosine_impl(a, u, zero);
}

double cosine(std::span<const float> a, std::span<const double> u, bool* zero) {
    return cosine_impl(a, u, zero);
}

bool equivalent(const MonitorState& a, const MonitorState& b) {
    if (a.bundle_checksum != b.bundle_checksum || a.n_layers != b.n_layers || a.d_model != b.d_model ||
        a.epsilon != b.epsilon || a.excluded_layers != b.excluded_layers || a.keep_reservoir != b.keep_reservoir ||
        a.zero_vectors != b.zero_vectors || a.ranges.size() != b.ranges.size())
        return false;
    for (const auto& [key, ea] : a.ranges) {
        auto it = b.ranges.find(key);
        if (it == b.ranges.end()) return false;
        const auto& eb = it->second;
        for (int r = 0; r < kRoleCount; ++r) {
            if (!(ea.roles[r] == eb.roles[r])) return false;
            auto va = ea.reservoirs[r].values;
            auto vb = eb.reservoirs[r].values;
            std::sort(va.begin(), va.end());
            std::sort(vb.begin(), vb.end());
            if (va != vb || ea.reservoirs[r].seen != eb.reservoirs[r].seen) return false;
        }
    }
    return true;
}

MonitorState make_state(const VectorBundle& bundle, const MonitorConfig& config) {
    if (!(config.epsilon >= 0.0)) throw ConfigError("epsilon must be >= 0");
    if (config.keep_reservoir && config.reservoir_cap == 0) throw ConfigError("reservoir cap must be >= 1");
    MonitorState s;
    s.bundle_checksum = bundle.checksum();
    s.n_layers = bundle.n_layers;
    s.d_model = bundle.d_model;
    s.epsilon = config.epsilon;
    if (config.excluded_layers) {
        s.excluded_layers = *config.excluded_layers;
    } else {
        for (uint32_t i = 1; i <= 3 && i <= bundle.n_layers; ++i) s.excluded_layers.insert(bundle.n_layers - i);
    }
    s.keep_reservoir = config.keep_reservoir;
    s.reservoir_cap = config.reservoir_cap;
    s.seed = config.seed;
    for (const auto& v : bundle.vectors) {
        if (s.excluded_layers.contains(v.layer)) continue;
        s.ranges.emplace(v.key(), RangeEntry{});
    }
    return s;
}

DirectionIndex::DirectionIndex(const VectorBundle& bundle, const std::set<uint32_t>& excluded_layers)
    : checksum_(bundle.checksum()), n_layers_(bundle.n_layers), d_model_(bundle.d_model) {
    for (const auto& v : bundle.vectors) {
        if (excluded_layers.contains(v.layer)) continue;
        Entry e{v.key(), std::vector<double>(v.u.begin(), v.u.end())};
        by_layer_[v.layer].push_back(std::move(e));
        ++count_;
    }
}

std::span<const DirectionIndex::Entry> DirectionIndex::at_layer(uint32_t layer) const {
    auto it = by_layer_.find(layer);
    if (it == by_layer_.end()) return {};
    return it->second;
}

const DirectionIndex::Entry* DirectionIndex::find(const DirectionKey& key) const {
    auto it = by_layer_.find(key.layer);
    if (it == by_layer_.end()) return nullptr;
    for (const auto& e : it->second)
        if (e.key == key) return &e;
    return nullptr;
}

json event_to_json(const AnomalyEvent& e) {
    return {{"token_index", e.token_index},
            {"role", to_string(e.role)},
            {"key", e.key.render()},
            {"layer", e.key.layer},
            {"site", to_string(e.key.site)},
            {"index", e.key.index},
            {"similarity", static_cast<double>(e.similarity)},
            {"bound", to_string(e.bound)},
            {"margin", e.margin},
            {"phase", to_string(e.phase)}};
}

std::optional<std::pair<Bound, double>> check_range(const RoleRange& range, float s, double epsilon) {
    if (range.n_tokens == 0) return std::nullopt;
    const double lo = static_cast<double>(range.c_min) - epsilon;
    const double hi = static_cast<double>(range.c_max) + epsilon;
    const double x = s;
    if (x < lo) return std::pair{Bound::below_min, lo - x};
    if (x > hi) return std::pair{Bound::above_max, x - hi};
    return std::nullopt;
}

namespace {

uint64_t reservoir_substream(const DirectionKey& key, Role role, uint64_t seen) {
    Fnv1a h;
    h.update_pod(key.layer);
    h.update_pod(static_cast<uint8_t>(key.site));
    h.update_pod(key.index);
    h.update_pod(static_cast<uint8_t>(role));
    h.update_pod(seen);
    return h.digest();
}

} // namespace

void absorb(MonitorState& state, const DirectionKey& key, Role role, float s, bool record_reservoir) {
    auto it = state.ranges.find(key);
    if (it == state.ranges.end()) throw ConfigError("no range entry for " + key.render());
    auto& rr = it->second.roles[static_cast<size_t>(role)];
    rr.c_min = std::min(rr.c_min, s);
    rr.c_max = std::max(rr.c_max, s);
    ++rr.n_tokens;
    if (!record_reservoir || !state.keep_reservoir) return;
    auto& res = it->second.reservoirs[static_cast<size_t>(role)];
    if (res.values.size() < state.reservoir_cap) {
        res.values.push_back(s);
    } else {
        // Algorithm R: keep s with probability cap / (seen + 1).
        CounterRng rng(state.seed, RngStream::reservoir, reservoir_substream(key, role, res.seen));
        const uint64_t j = rng.below(res.seen + 1);
        if (j < state.reservoir_cap) res.values[j] = s;
        res.sampled = true;
    }
    ++res.seen;
}

void check_compatible(const DirectionIndex& index, const MonitorState& state) {
    if (index.checksum() != state.bundle_checksum)
        throw ConfigError("state/bundle checksum mismatch: state " + state.bundle_checksum + ", bundle " + index.checksum());
}

std::vector<AnomalyEvent> observe(const DirectionIndex& index, MonitorState& state, const TokenRecord& record,
                                  uint64_t token_index, Phase phase) {
    check_compatible(index, state);
    if (record.d_model != index.d_model() || record.values.size() != size_t{index.n_layers()} * index.d_model())
        throw ShapeError("token " + std::to_string(token_index) + ": record shape does not match bundle (" +
                         std::to_string(index.n_layers()) + " layers x " + std::to_string(index.d_model()) + ")");
    const bool update = state.mode == Mode::calibrate || state.mode == Mode::monitor;
    const bool emit = state.mode != Mode::calibrate;
    const auto role_idx = static_cast<size_t>(record.role);
    std::vector<AnomalyEvent> events;
    for (uint32_t l = 0; l < index.n_layers(); ++l) {
        const auto dirs = index.at_layer(l);
        if (dirs.empty()) continue;
        const auto a = record.layer(l);
        bool zero = false;
        for (const auto& d : dirs) {
            const float s = static_cast<float>(cosine(a, std::span<const double>(d.u), &zero));
            auto& entry = state.ranges.at(d.key);
            if (emit) {
                if (auto hit = check_range(entry.roles[role_idx], s, state.epsilon))
                    events.push_back({token_index, record.role, d.key, s, hit->first, hit->second, phase});
            }
            if (update) absorb(state, d.key, record.role, s, state.mode == Mode::calibrate);
        }
        if (zero) ++state.zero_vectors;
    }
    return events;
}

json report_to_json(const Report& r, const MonitorState& state) {
    json events = json::array();
    for (const auto& e : r.events) events.push_back(event_to_json(e));
    json tallies = json::object();
    for (const auto& [k, n] : r.tallies) tallies[k.render()] = n;
    json j = {{"trace_id", r.trace_id},
              {"input_checksum", r.input_checksum},
              {"flagged_prompt", r.flagged_prompt},
              {"flagged_completion", r.flagged_completion},
              {"events", std::move(events)},
              {"tallies", std::move(tallies)},
              {"totals",
               {{"tokens", r.tokens},
                {"prompt_tokens", r.prompt_tokens},
                {"events", r.events.size()},
                {"zero_vectors", r.zero_vectors}}},
              {"config",
               {{"mode", to_string(r.mode)},
                {"epsilon", state.epsilon},
                {"excluded_layers", state.excluded_layers},
                {"bundle_checksum", state.bundle_checksum},
                {"trim_q", state.trim_q ? json(*state.trim_q) : json(nullptr)},
                {"trim_approximate", state.trim_approximate}}}};
    if (r.mode == Mode::steer) {
        json dirs = json::array();
        for (const auto& k : r.steering_triggered) dirs.push_back(k.render());
        j["steering_directions_triggered"] = std::move(dirs);
    }
    return j;
}

StreamScanner::StreamScanner(const DirectionIndex& index, MonitorState& state, std::string trace_id)
    : index_(index), state_(state) {
    check_compatible(index, state);
    report_.trace_id = std::move(trace_id);
    report_.mode = state.mode;
}

Phase StreamScanner::current_phase(const TokenRecord& record) const {
    return (seen_assistant_ || record.role == Role::assistant) ? Phase::completion : Phase::prompt;
}

std::vector<AnomalyEvent> StreamScanner::feed(const TokenRecord& record) {
    const Phase phase = current_phase(record);
    if (record.role == Role::assistant) seen_assistant_ = true;
    const uint64_t zeros_before = state_.zero_vectors;
    auto events = observe(index_, state_, record, report_.tokens, phase);
    report_.zero_vectors += state_.zero_vectors - zeros_before;
    ++report_.tokens;
    if (phase == Phase::prompt) ++report_.prompt_tokens;
    for (const auto& e : events) {
        ++report_.tallies[e.key];
        if (e.phase == Phase::prompt) report_.flagged_prompt = true;
        report_.flagged_completion = true;
        report_.events.push_back(e);
    }
    return events;
}

Report scan_trace(const DirectionIndex& index, MonitorState& state, const ActivationTrace& trace, Mode mode,
                  std::string trace_id) {
    state.mode = mode;
    StreamScanner scanner(index, state, std::move(trace_id));
    for (const auto& t : trace.tokens) scanner.feed(t);
    return std::move(scanner.report());
}

MonitorState merge(const MonitorState& a, const MonitorState& b) {
    if (a.bundle_checksum != b.bundle_checksum) throw ConfigError("merge: bundle checksum differs");
    if (a.epsilon != b.epsilon) throw ConfigError("merge: epsilon differs");
    if (a.excluded_layers != b.excluded_layers) throw ConfigError("merge: excluded layers differ");
    if (a.keep_reservoir != b.keep_reservoir || a.reservoir_cap != b.reservoir_cap)
        throw ConfigError("merge: reservoir settings differ");
    for (const auto* s : {&a, &b})
        if (s->mode != Mode::calibrate && s->mode != Mode::freeze)
            throw ConfigError("merge: only calibrate/freeze states can be merged (got " + std::string(to_string(s->mode)) + ")");

    MonitorState out = a;
    out.zero_vectors = a.zero_vectors + b.zero_vectors;
    out.trim_q.reset();
    out.trim_approximate = false;
    for (const auto& [key, eb] : b.ranges) {
        auto [it, inserted] = out.ranges.try_emplace(key, eb);
        if (inserted) continue;
        auto& eo = it->second;
        for (size_t r = 0; r < kRoleCount; ++r) {
            auto& ro = eo.roles[r];
            const auto& rb = eb.roles[r];
            ro.c_min = std::min(ro.c_min, rb.c_min);
            ro.c_max = std::max(ro.c_max, rb.c_max);
            ro.n_tokens += rb.n_tokens;
            auto& res = eo.reservoirs[r];
            const auto& resb = eb.reservoirs[r];
            res.values.insert(res.values.end(), resb.values.begin(), resb.values.end());
            res.seen += resb.seen;
            res.sampled = res.sampled || resb.sampled;
            if (res.values.size() > out.reservoir_cap) {
                // Partial Fisher-Yates keeps a uniform subset of the cap size.
                CounterRng rng(out.seed, RngStream::reservoir, reservoir_substream(key, static_cast<Role>(r), res.seen) ^ 0x6d65726765ULL);
                for (size_t i = 0; i < out.reservoir_cap; ++i) {
                    const size_t j = i + static_cast<size_t>(rng.below(res.values.size() - i));
                    std::swap(res.values[i], res.values[j]);
                }
                res.values.resize(out.reservoir_cap);
                res.sampled = true;
            }
        }
    }
    return out;
}

void trim_ranges(MonitorState& state, double q) {
    if (!(q >= 0.0 && q < 0.5)) throw UsageError("trim quantile must satisfy 0 <= q < 0.5");
    if (!state.keep_reservoir) throw ConfigError("trim_ranges: state has no calibration reservoirs");
    bool approximate = false;
    for (auto& [key, entry] : state.ranges) {
        for (size_t r = 0; r < kRoleCount; ++r) {
            const auto& res = entry.reservoirs[r];
            if (res.values.empty()) continue;
            std::vector<float> v = res.values;
            std::sort(v.begin(), v.end());
            const auto n = static_cast<double>(v.size());
            // Nearest rank; the small offset absorbs (1 - q) * N landing a hair above an integer.
            auto upper = static_cast<size_t>(std::ceil((1.0 - q) * n - 1e-9));
            upper = std::clamp<size_t>(upper, 1, v.size());
            const size_t lower = v.size() + 1 - upper;
            entry.roles[r].c_min = v[lower - 1];
            entry.roles[r].c_max = v[upper - 1];
            approximate = approximate || res.sampled;
        }
    }
    state.trim_q = q;
    state.trim_approximate = approximate;
}

double fpr_bound(uint64_t t, uint64_t n) {
    if (t < 1 || n < 2) throw UsageError("fpr_bound requires t >= 1 and n >= 2");
    return -std::expm1(2.0 * static_cast<double>(t) * std::log1p(-1.0 / static_cast<double>(n)));
}

// ---- state files ----

namespace {

constexpr char kResMagic[4] = {'W', 'W', 'R', 'S'};

json range_bound(float v, uint64_t n) {
    if (n == 0) return nullptr;
    return static_cast<double>(v);
}

template <typename T>
void put(std::vector<uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const std::vector<uint8_t>& in, size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw FormatError("truncated reservoir sidecar");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace

std::string serialize_state(const MonitorState& s) {
    json ranges = json::array();
    for (const auto& [key, entry] : s.ranges) {
        for (size_t r = 0; r < kRoleCount; ++r) {
            const auto& rr = entry.roles[r];
            ranges.push_back({{"layer", key.layer},
                              {"site", to_string(key.site)},
                              {"index", key.index},
                              {"role", to_string(static_cast<Role>(r))},
                              {"c_min", range_bound(rr.c_min, rr.n_tokens)},
                              {"c_max", range_bound(rr.c_max, rr.n_tokens)},
                              {"n_tokens", rr.n_tokens}});
        }
    }
    json j = {{"format_version", s.format_version},
              {"bundle_checksum", s.bundle_checksum},
              {"n_layers", s.n_layers},
              {"d_model", s.d_model},
              {"epsilon", s.epsilon},
              {"excluded_layers", s.excluded_layers},
              {"mode", to_string(s.mode)},
              {"reservoir", {{"enabled", s.keep_reservoir}, {"cap", s.reservoir_cap}, {"seed", s.seed}}},
              {"trim", s.trim_q ? json{{"q", *s.trim_q}, {"approximate", s.trim_approximate}} : json(nullptr)},
              {"diagnostics", {{"zero_vectors", s.zero_vectors}}},
              {"ranges", std::move(ranges)}};
    return j.dump(1) + "\n";
}

std::vector<uint8_t> serialize_reservoirs(const MonitorState& s) {
    struct Row {
        const DirectionKey* key;
        size_t role;
        const Reservoir* res;
    };
    std::vector<Row> rows;
    for (const auto& [key, entry] : s.ranges)
        for (size_t r = 0; r < kRoleCount; ++r)
            if (entry.reservoirs[r].seen > 0) rows.push_back({&key, r, &entry.reservoirs[r]});

    std::vector<uint8_t> out(kResMagic, kResMagic + 4);
    put<uint32_t>(out, 1);
    put<uint32_t>(out, static_cast<uint32_t>(rows.size()));
    for (const auto& row : rows) {
        put<uint32_t>(out, row.key->layer);
        put<uint32_t>(out, row.key->index);
        put<uint8_t>(out, static_cast<uint8_t>(row.key->site));
        put<uint8_t>(out, static_cast<uint8_t>(row.role));
        put<uint8_t>(out, row.res->sampled ? 1 : 0);
        put<uint8_t>(out, 0);
        put<uint64_t>(out, row.res->seen);
        put<uint64_t>(out, row.res->values.size());
    }
    for (const auto& row : rows) {
        const auto* p = reinterpret_cast<const uint8_t*>(row.res->values.data());
        out.insert(out.end(), p, p + row.res->values.size() * sizeof(float));
    }
    return out;
}

MonitorState parse_state(const std::string& text, const std::vector<uint8_t>* sidecar) {
    MonitorState s;
    try {
        const json j = json::parse(text);
        s.format_version = j.at("format_version").get<int>();
        if (s.format_version != 1) throw FormatError("unsupported state format_version " + std::to_string(s.format_version));
        s.bundle_checksum = j.at("bundle_checksum").get<std::string>();
        s.n_layers = j.at("n_layers").get<uint32_t>();
        s.d_model = j.at("d_model").get<uint32_t>();
        s.epsilon = j.at("epsilon").get<double>();
        if (!(s.epsilon >= 0.0)) throw FormatError("epsilon must be >= 0");
        s.excluded_layers = j.at("excluded_layers").get<std::set<uint32_t>>();
        s.mode = mode_from_string(j.at("mode").get<std::string>());
        const auto& res = j.at("reservoir");
        s.keep_reservoir = res.at("enabled").get<bool>();
        s.reservoir_cap = res.at("cap").get<uint64_t>();
        s.seed = res.value("seed", uint64_t{0});
        if (!j.at("trim").is_null()) {
            s.trim_q = j.at("trim").at("q").get<double>();
            s.trim_approximate = j.at("trim").at("approximate").get<bool>();
        }
        s.zero_vectors = j.value("diagnostics", json::object()).value("zero_vectors", uint64_t{0});
        for (const auto& e : j.at("ranges")) {
            const DirectionKey key{e.at("layer").get<uint32_t>(), site_from_string(e.at("site").get<std::string>()),
                                   e.at("index").get<uint32_t>()};
            const auto role = static_cast<size_t>(role_from_string(e.at("role").get<std::string>()));
            auto& rr = s.ranges[key].roles[role];
            rr.n_tokens = e.at("n_tokens").get<uint64_t>();
            if (rr.n_tokens > 0) {
                rr.c_min = static_cast<float>(e.at("c_min").get<double>());
                rr.c_max = static_cast<float>(e.at("c_max").get<double>());
                if (!(rr.c_min <= rr.c_max)) throw FormatError("range for " + key.render() + " has c_min > c_max");
            }
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed state: ") + e.what());
    }
    if (s.keep_reservoir) {
        if (!sidecar) throw FormatError("state declares reservoirs but no sidecar was found");
        const auto& in = *sidecar;
        if (in.size() < 12 || std::memcmp(in.data(), kResMagic, 4) != 0) throw FormatError("bad reservoir sidecar magic");
        size_t pos = 4;
        if (get<uint32_t>(in, pos) != 1) throw FormatError("unsupported reservoir sidecar version");
        const auto n = get<uint32_t>(in, pos);
        struct Row {
            DirectionKey key;
            size_t role;
            bool sampled;
            uint64_t seen, count;
        };
        std::vector<Row> rows;
        for (uint32_t i = 0; i < n; ++i) {
            Row row;
            row.key.layer = get<uint32_t>(in, pos);
            row.key.index = get<uint32_t>(in, pos);
            const auto site = get<uint8_t>(in, pos);
            if (site > 2) throw FormatError("bad site in reservoir sidecar");
            row.key.site = static_cast<Site>(site);
            row.role = static_cast<size_t>(role_from_byte(get<uint8_t>(in, pos)));
            row.sampled = get<uint8_t>(in, pos) != 0;
            get<uint8_t>(in, pos);
            row.seen = get<uint64_t>(in, pos);
            row.count = get<uint64_t>(in, pos);
            rows.push_back(row);
        }
        for (const auto& row : rows) {
            auto it = s.ranges.find(row.key);
            if (it == s.ranges.end()) throw FormatError("reservoir sidecar names unknown direction " + row.key.render());
            auto& res = it->second.reservoirs[row.role];
            if (row.count > (in.size() - pos) / sizeof(float)) throw FormatError("truncated reservoir sidecar");
            res.values.resize(row.count);
            std::memcpy(res.values.data(), in.data() + pos, row.count * sizeof(float));
            pos += row.count * sizeof(float);
            res.seen = row.seen;
            res.sampled = row.sampled;
        }
        if (pos != in.size()) throw FormatError("trailing bytes in reservoir sidecar");
    }
    return s;
}

void write_state(const MonitorState& state, const std::string& path) {
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write state " + path);
        out << serialize_state(state);
        if (!out) throw IoError("write failed: " + path);
    }
    if (state.keep_reservoir) {
        const auto bytes = serialize_reservoirs(state);
        std::ofstream out(path + ".res", std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write reservoir sidecar " + path + ".res");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + path + ".res");
    }
}

MonitorState read_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open state " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    std::vector<uint8_t> sidecar;
    bool have_sidecar = false;
    if (std::ifstream rs(path + ".res", std::ios::binary); rs) {
        sidecar.assign(std::istreambuf_iterator<char>(rs), std::istreambuf_iterator<char>());
        have_sidecar = true;
    }
    return parse_state(ss.str(), have_sidecar ? &sidecar : nullptr);
}

} // namespace ww
