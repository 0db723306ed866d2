// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>

#include <json.hpp>

#include "ww/monitor.hpp"
#include "ww/trace.hpp"

namespace ww {

// NDJSON protocol, one object per line.
//
// Request:  {"seq": 1, "kind": "token", "role": "user", "token_id": 17,
//            "payload": "<base64 of layer-major LE f32>"}
//           ("vectors": [[...], ...] may replace "payload")
//           {"seq": 9, "kind": "end_stream"}
// Response: {"seq": 1, "events": [...]} plus "steered": "<base64>" in steer
//           mode; end_stream answers with {"seq", "kind", "report"} and
//           resets the per-stream steer set and seq counter.
// Errors:   {"seq": <n or null>, "error": "..."}; the stream continues.
struct ServeStats {
    size_t requests = 0;
    size_t errors = 0;
    size_t streams = 0;
};

ServeStats serve_stdio(std::istream& in, std::ostream& out, const DirectionIndex& index, MonitorState& state, Mode mode);

// Request line for one token record (used by replay tooling and tests).
std::string token_request(uint64_t seq, const TokenRecord& record);

} // namespace ww
