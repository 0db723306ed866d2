// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ww/common.hpp"

namespace ww {

enum class TraceDType : uint8_t { f32, f16 };

struct TraceHeader {
    std::string model_id;
    uint32_t n_layers = 0;
    uint32_t d_model = 0;
    TraceDType dtype = TraceDType::f32;
    std::optional<uint64_t> prompt_boundary;
    std::string notes;

    // Shape and dtype agree; ids/notes/boundary may differ between segments.
    bool compatible(const TraceHeader& o) const {
        return n_layers == o.n_layers && d_model == o.d_model && dtype == o.dtype && model_id == o.model_id;
    }
    bool operator==(const TraceHeader&) const = default;
};

inline constexpr uint32_t kNoTokenId = 0xFFFFFFFFu;

// Post-layer residual activations of one token, layer-major:
// values[l * d_model + i] is coordinate i after layer l.
struct TokenRecord {
    Role role = Role::user;
    std::optional<uint32_t> token_id;
    uint8_t flags = 0;
    uint32_t d_model = 0;
    std::vector<float> values;

    std::span<const float> layer(uint32_t l) const {
        return {values.data() + size_t{l} * d_model, d_model};
    }
    std::span<float> layer(uint32_t l) {
        return {values.data() + size_t{l} * d_model, d_model};
    }
    uint32_t n_layers() const { return d_model ? static_cast<uint32_t>(values.size() / d_model) : 0; }
    bool operator==(const TokenRecord&) const = default;
};

struct ActivationTrace {
    TraceHeader header;
    std::vector<TokenRecord> tokens;

    bool operator==(const ActivationTrace&) const = default;
};

// Count of non-assistant tokens before the first assistant token (all tokens
// when none is an assistant token).
uint64_t compute_prompt_boundary(std::span<const TokenRecord> tokens);

// Throws on header/record shape disagreement or non-finite values.
void validate_trace(const ActivationTrace& trace);

// Serialization: "WWTR", u32 version, u32 header length, header JSON, then
// records (u8 role, u8 flags, u16 reserved, u32 token_id, values LE).
// The written prompt_boundary is always recomputed from the tokens.
void write_trace(const ActivationTrace& trace, std::ostream& out);
void write_trace(const ActivationTrace& trace, const std::string& path);

// Streaming reader; holds one record at a time. In multi-segment mode a
// concatenation of traces with compatible headers reads as one sequence.
class TraceReader {
public:
    explicit TraceReader(const std::string& path, bool multi_segment = false);
    explicit TraceReader(std::unique_ptr<std::istream> in, bool multi_segment = false);

    const TraceHeader& header() const { return header_; }
    // False at clean end of stream; throws FormatError on a truncated record.
    bool next(TokenRecord& record);
    uint64_t records_read() const { return count_; }
    size_t segments() const { return segments_; }

private:
    void read_header(TraceHeader& h);

    std::unique_ptr<std::istream> in_;
    bool multi_;
    TraceHeader header_;
    uint64_t count_ = 0;
    size_t segments_ = 1;
    std::vector<uint8_t> buf_;
};

ActivationTrace read_trace(const std::string& path, bool multi_segment = false);

} // namespace ww
