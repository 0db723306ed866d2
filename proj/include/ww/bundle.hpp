// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ww/checkpoint.hpp"
#include "ww/common.hpp"

namespace ww {

enum class Provenance : uint8_t { diff, raw };

struct BehavioralVector {
    uint32_t layer = 0;
    Site site = Site::attn_out;
    uint32_t index = 0;
    double sigma = 0.0;
    std::vector<float> u; // unit, length d_model

    DirectionKey key() const { return {layer, site, index}; }
    bool operator==(const BehavioralVector&) const = default;
};

// Sites that returned fewer than k directions (zero deltas, low-rank deltas)
// or whose subspace iteration did not reach tolerance.
struct SiteNote {
    uint32_t layer = 0;
    Site site = Site::attn_out;
    uint32_t requested = 0;
    uint32_t returned = 0;
    bool converged = true;
    bool operator==(const SiteNote&) const = default;
};

struct VectorBundle {
    int format_version = 1;
    std::string base_id;
    std::string post_id;
    uint32_t d_model = 0;
    uint32_t n_layers = 0;
    uint32_t k = 0;
    bool subtract = true;
    uint64_t seed = 0;
    uint32_t oversample = 8;
    uint32_t power_iters = 4;
    std::vector<BehavioralVector> vectors; // ordered by (layer, site, index)
    std::vector<SiteNote> site_notes;

    Provenance provenance() const { return subtract ? Provenance::diff : Provenance::raw; }
    // Content checksum over ids, dims and vector payloads; ties monitor
    // states to the bundle they were calibrated against.
    std::string checksum() const;
    const BehavioralVector* find(const DirectionKey& key) const;
    bool operator==(const VectorBundle&) const = default;
};

// Unit norm (1e-6), non-increasing sigma and |u_i . u_j| <= 1e-4 within a
// site, ordering by key. Throws NumericError naming the offending vector.
void validate_bundle(const VectorBundle& bundle);

struct ExtractOptions {
    uint32_t k = 20;
    bool subtract = true;
    std::optional<std::vector<uint32_t>> layers; // default: all
    std::vector<Site> sites{Site::attn_out, Site::mlp_down};
    uint32_t oversample = 8;
    uint32_t power_iters = 4;
    uint64_t seed = 0;
    unsigned threads = 1;
    std::string base_id;
    std::string post_id;
};

// Per selected (layer, site): M = post - base (or post when !subtract),
// truncated SVD, top-k left singular vectors. Site order in the output is
// schedule-independent.
VectorBundle extract_behavioral_vectors(const TensorMap& base, const TensorMap& post,
                                        const LayerNamingSpec& spec, const ExtractOptions& opts);

std::string serialize_bundle(const VectorBundle& bundle);
VectorBundle parse_bundle(const std::string& text);
void write_bundle(const VectorBundle& bundle, const std::string& path);
VectorBundle read_bundle(const std::string& path);

} // namespace ww
