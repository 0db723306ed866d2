// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ww/bundle.hpp"
#include "ww/common.hpp"
#include "ww/trace.hpp"

namespace ww {

enum class Mode : uint8_t { calibrate, monitor, freeze, steer };
enum class Bound : uint8_t { below_min, above_max };
enum class Phase : uint8_t { prompt, completion };

std::string_view to_string(Mode m);
Mode mode_from_string(std::string_view s);
std::string_view to_string(Bound b);
std::string_view to_string(Phase p);

// cos(a, u) for unit u, computed in double. Returns 0 for a zero vector
// (and sets *zero when given).
double cosine(std::span<const float> a, std::span<const float> u, bool* zero = nullptr);
double cosine(std::span<const float> a, std::span<const double> u, bool* zero = nullptr);

// Calibrated range for one (direction, role). Sentinels (+inf, -inf) iff
// n_tokens == 0. Similarities are held at f32 precision.
struct RoleRange {
    float c_min = std::numeric_limits<float>::infinity();
    float c_max = -std::numeric_limits<float>::infinity();
    uint64_t n_tokens = 0;
    bool operator==(const RoleRange&) const = default;
};

struct Reservoir {
    std::vector<float> values;
    uint64_t seen = 0;    // similarities offered, including those sampled out
    bool sampled = false; // true once the cap forced sampling
};

struct RangeEntry {
    std::array<RoleRange, kRoleCount> roles;
    std::array<Reservoir, kRoleCount> reservoirs;
};

struct MonitorConfig {
    double epsilon = 0.01;
    std::optional<std::set<uint32_t>> excluded_layers; // default: last three layers
    bool keep_reservoir = false;
    uint64_t reservoir_cap = uint64_t{1} << 20;
    uint64_t seed = 0;
};

struct MonitorState {
    int format_version = 1;
    std::string bundle_checksum;
    uint32_t n_layers = 0;
    uint32_t d_model = 0;
    double epsilon = 0.01;
    std::set<uint32_t> excluded_layers;
    Mode mode = Mode::calibrate;
    bool keep_reservoir = false;
    uint64_t reservoir_cap = uint64_t{1} << 20;
    uint64_t seed = 0;
    std::optional<double> trim_q;
    bool trim_approximate = false;
    uint64_t zero_vectors = 0;
    std::map<DirectionKey, RangeEntry> ranges;
};

// Ranges and counts compare exactly; reservoirs compare as multisets.
bool equivalent(const MonitorState& a, const MonitorState& b);

// Fresh state: every non-excluded bundle direction gets sentinel ranges.
MonitorState make_state(const VectorBundle& bundle, const MonitorConfig& config = {});

// Monitored directions grouped by layer, with unit vectors in double.
class DirectionIndex {
public:
    struct Entry {
        DirectionKey key;
        std::vector<double> u;
    };

    DirectionIndex(const VectorBundle& bundle, const std::set<uint32_t>& excluded_layers);

    const std::string& checksum() const { return checksum_; }
    uint32_t n_layers() const { return n_layers_; }
    uint32_t d_model() const { return d_model_; }
    size_t size() const { return count_; }
    std::span<const Entry> at_layer(uint32_t layer) const;
    const Entry* find(const DirectionKey& key) const;

private:
    std::string checksum_;
    uint32_t n_layers_ = 0;
    uint32_t d_model_ = 0;
    size_t count_ = 0;
    std::map<uint32_t, std::vector<Entry>> by_layer_;
};

struct AnomalyEvent {
    uint64_t token_index = 0;
    Role role = Role::user;
    DirectionKey key;
    float similarity = 0.0f;
    Bound bound = Bound::above_max;
    double margin = 0.0;
    Phase phase = Phase::prompt;
    bool operator==(const AnomalyEvent&) const = default;
};

nlohmann::json event_to_json(const AnomalyEvent& e);

// Outcome of checking one similarity against a role range. No event on an
// empty range (first sight) or inside [c_min - eps, c_max + eps].
std::optional<std::pair<Bound, double>> check_range(const RoleRange& range, float s, double epsilon);

// Widen the range to include s; record s in the reservoir when enabled.
void absorb(MonitorState& state, const DirectionKey& key, Role role, float s, bool record_reservoir);

// Throws ShapeError / ConfigError on record shape or checksum mismatch.
void check_compatible(const DirectionIndex& index, const MonitorState& state);

// One token through the monitor hook in state.mode. Calibrate never emits;
// calibrate and monitor widen ranges; freeze and steer leave them unchanged.
std::vector<AnomalyEvent> observe(const DirectionIndex& index, MonitorState& state, const TokenRecord& record,
                                  uint64_t token_index, Phase phase);

struct Report {
    std::string trace_id;
    std::string input_checksum;
    Mode mode = Mode::monitor;
    bool flagged_prompt = false;
    bool flagged_completion = false;
    uint64_t tokens = 0;
    uint64_t prompt_tokens = 0;
    uint64_t zero_vectors = 0;
    std::vector<AnomalyEvent> events;
    std::map<DirectionKey, uint64_t> tallies;
    std::vector<DirectionKey> steering_triggered; // steer mode, activation order
};

nlohmann::json report_to_json(const Report& report, const MonitorState& state);

// Incremental scan shared by the offline scanner and the stdio server. The
// phase is prompt until the first assistant token, which matches the
// prompt_boundary stored in trace headers.
class StreamScanner {
public:
    StreamScanner(const DirectionIndex& index, MonitorState& state, std::string trace_id = {});

    std::vector<AnomalyEvent> feed(const TokenRecord& record);
    Phase current_phase(const TokenRecord& record) const;
    Report& report() { return report_; }
    uint64_t tokens_seen() const { return report_.tokens; }

private:
    const DirectionIndex& index_;
    MonitorState& state_;
    Report report_;
    bool seen_assistant_ = false;
};

Report scan_trace(const DirectionIndex& index, MonitorState& state, const ActivationTrace& trace, Mode mode,
                  std::string trace_id = {});

// Pointwise min/max/sum; reservoirs concatenated (then down-sampled to the cap).
MonitorState merge(const MonitorState& a, const MonitorState& b);

// Replace each range with the inner nearest-rank quantiles [q, 1 - q] of its
// reservoir: upper rank ceil((1 - q) N), lower rank N + 1 - upper.
void trim_ranges(MonitorState& state, double q);

// 1 - (1 - 1/n)^(2t): false-positive bound for t directions after n - 1
// calibration samples.
double fpr_bound(uint64_t t, uint64_t n);

// State file: JSON, plus a binary reservoir sidecar at path + ".res" when
// reservoirs are kept.
std::string serialize_state(const MonitorState& state);
std::vector<uint8_t> serialize_reservoirs(const MonitorState& state);
MonitorState parse_state(const std::string& text, const std::vector<uint8_t>* sidecar);
void write_state(const MonitorState& state, const std::string& path);
MonitorState read_state(const std::string& path);

} // namespace ww
