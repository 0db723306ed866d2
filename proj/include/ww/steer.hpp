// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <set>
#include <span>
#include <vector>

#include "ww/monitor.hpp"

namespace ww {

// a - (a . u) u. Throws NumericError unless |u| = 1 within 1e-6.
std::vector<float> orthogonalize(std::span<const float> a, std::span<const float> u);

// Directions steered in the current stream. Only grows; reset per stream.
class SteerSet {
public:
    bool add(const DirectionKey& key); // false when already active
    bool contains(const DirectionKey& key) const { return members_.contains(key); }
    std::span<const DirectionKey> at_layer(uint32_t layer) const;
    const std::vector<DirectionKey>& in_order() const { return order_; }
    size_t size() const { return order_.size(); }
    bool empty() const { return order_.empty(); }
    void clear();

private:
    std::set<DirectionKey> members_;
    std::vector<DirectionKey> order_;
    std::map<uint32_t, std::vector<DirectionKey>> by_layer_;
};

struct SteerOutcome {
    TokenRecord record;
    std::vector<AnomalyEvent> events;
    std::vector<DirectionKey> newly_triggered;
};

// Per layer: project out active directions, check the inactive directions
// on the projected activation (adding and projecting newly violated ones as
// they are found; events are emitted only for these), then re-project until simultaneously orthogonal to all
// active directions. Inactive directions are re-checked on the result until
// none is newly violated, so a second pass changes nothing. Ranges are not
// updated.
SteerOutcome steer_record(const DirectionIndex& index, const MonitorState& state, SteerSet& steer_set,
                          const TokenRecord& record, uint64_t token_index, Phase phase);

// Offline steering of a whole trace with a fresh steer set. The steered
// trace carries a header note; only the flagged layer's stored activation
// changes (downstream layers cannot be recomputed without the model).
struct SteeredTrace {
    ActivationTrace trace;
    Report report;
};

SteeredTrace steer_trace(const DirectionIndex& index, const MonitorState& state, const ActivationTrace& trace,
                         std::string trace_id = {});

// Streaming counterpart used by both steer_trace and the stdio server.
class StreamSteerer {
public:
    StreamSteerer(const DirectionIndex& index, const MonitorState& state, std::string trace_id = {});

    SteerOutcome feed(const TokenRecord& record);
    Report& report() { return report_; }
    const SteerSet& steer_set() const { return set_; }

private:
    const DirectionIndex& index_;
    const MonitorState& state_;
    SteerSet set_;
    Report report_;
    bool seen_assistant_ = false;
};

} // namespace ww
