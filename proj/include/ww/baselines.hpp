// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ww/bundle.hpp"
#include "ww/trace.hpp"

namespace ww {

// Nearest-rank percentile (0 < p <= 100): the value at 1-based rank ceil(p/100 * N).
double nearest_rank_percentile(std::vector<double> values, double p);

// ---- activation-difference norm ----

struct ActDiffConfig {
    std::optional<uint32_t> layer;          // default: n_layers / 2
    double percentile = 98.0;
    double epsilon = 0.01;
    std::optional<uint64_t> token_position; // default: last prompt token
};

// |Act(post) - Act(base)| at the configured layer and position.
double act_diff_norm(const ActivationTrace& base, const ActivationTrace& post, const ActDiffConfig& cfg);

double act_diff_threshold(std::span<const ActivationTrace> base_traces, std::span<const ActivationTrace> post_traces,
                          const ActDiffConfig& cfg);

// Strict: norm > threshold.
bool act_diff_flag(const ActivationTrace& base, const ActivationTrace& post, const ActDiffConfig& cfg, double threshold);

// ---- PCA ----

struct PcaResult {
    Eigen::VectorXd mean;
    Eigen::MatrixXd components;      // d x n_components, unit columns
    Eigen::MatrixXd projections;     // N x n_components
    Eigen::VectorXd explained_variance;
    Eigen::VectorXd explained_ratio;
    std::vector<bool> zero_variance; // per component
};

// Rows of `data` are samples. Components are right singular vectors of the
// centered data (via the dense SVD oracle), signed like behavioral vectors.
PcaResult pca_fit_project(const Eigen::MatrixXd& data, size_t n_components);

// ---- contrastive probe ----

// Normalized difference of the two activations at (layer, position).
// Position defaults to each trace's last prompt token.
std::vector<float> probe_direction(const ActivationTrace& pos, const ActivationTrace& neg, uint32_t layer,
                                   std::optional<uint64_t> token_position = std::nullopt);

// Ad-hoc single-direction bundle (site "probe") so the monitor can use it.
VectorBundle probe_bundle(std::span<const float> direction, uint32_t layer, uint32_t n_layers, std::string id);

// ---- first-token KL ----

using CategoricalDist = std::vector<double>;

// Validates non-negative entries summing to 1 within 1e-6.
void validate_dist(const CategoricalDist& p);

// KL(p || q) in nats; +inf when q is zero where p is positive.
double kl_divergence(const CategoricalDist& p, const CategoricalDist& q);

// Median (nearest rank) over `samplings` draws of KL(a || b) with a and b
// picked uniformly from each set.
double median_kl(std::span<const CategoricalDist> a, std::span<const CategoricalDist> b, size_t samplings = 1000,
                 uint64_t seed = 0);

// {"vocab_size": V, "dists": [[...], ...]}
std::vector<CategoricalDist> read_dists(const std::string& path);
std::vector<CategoricalDist> parse_dists(const std::string& text);

} // namespace ww
