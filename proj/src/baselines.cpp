// SPDX-License-Identifier: Apache-2.0
#include "ww/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "ww/rng.hpp"
#include "ww/svd.hpp"

namespace ww {

using json = nlohmann::json;

double nearest_rank_percentile(std::vector<double> values, double p) {
    if (values.empty()) throw UsageError("percentile of an empty set");
    if (!(p > 0.0 && p <= 100.0)) throw UsageError("percentile must be in (0, 100]");
    std::sort(values.begin(), values.end());
    auto rank = static_cast<size_t>(std::ceil(p / 100.0 * static_cast<double>(values.size()) - 1e-9));
    rank = std::clamp<size_t>(rank, 1, values.size());
    return values[rank - 1];
}

namespace {

uint64_t position_of(const ActivationTrace& t, std::optional<uint64_t> pos) {
    if (pos) return *pos;
    const uint64_t boundary = compute_prompt_boundary(t.tokens);
    if (boundary == 0) throw ShapeError("trace has no prompt tokens");
    return boundary - 1;
}

} // namespace

double act_diff_norm(const ActivationTrace& base, const ActivationTrace& post, const ActDiffConfig& cfg) {
    if (base.header.n_layers != post.header.n_layers || base.header.d_model != post.header.d_model)
        throw ShapeError("act_diff: base and post trace shapes differ");
    const uint32_t layer = cfg.layer.value_or(post.header.n_layers / 2);
    if (layer >= post.header.n_layers) throw UsageError("act_diff: layer out of range");
    const uint64_t pb = position_of(base, cfg.token_position);
    const uint64_t pp = position_of(post, cfg.token_position);
    if (pb != pp) throw ShapeError("act_diff: traces are misaligned (prompt lengths differ)");
    if (pp >= post.tokens.size() || pb >= base.tokens.size()) throw ShapeError("act_diff: token position out of range");
    const auto a = base.tokens[pb].layer(layer);
    const auto b = post.tokens[pp].layer(layer);
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = double(b[i]) - double(a[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

double act_diff_threshold(std::span<const ActivationTrace> base_traces, std::span<const ActivationTrace> post_traces,
                          const ActDiffConfig& cfg) {
    if (base_traces.empty()) throw UsageError("act_diff_threshold: empty calibration set");
    if (base_traces.size() != post_traces.size()) throw ShapeError("act_diff_threshold: base/post trace counts differ");
    if (!(cfg.percentile > 0.0 && cfg.percentile < 100.0)) throw UsageError("percentile must be in (0, 100)");
    std::vector<double> norms;
    norms.reserve(base_traces.size());
    for (size_t i = 0; i < base_traces.size(); ++i) norms.push_back(act_diff_norm(base_traces[i], post_traces[i], cfg));
    return nearest_rank_percentile(std::move(norms), cfg.percentile) + cfg.epsilon;
}

bool act_diff_flag(const ActivationTrace& base, const ActivationTrace& post, const ActDiffConfig& cfg, double threshold) {
    return act_diff_norm(base, post, cfg) > threshold;
}

PcaResult pca_fit_project(const Eigen::MatrixXd& data, size_t n_components) {
    const auto n = data.rows();
    const auto d = data.cols();
    if (n < 2) throw UsageError("pca needs at least 2 samples");
    if (n_components == 0 || static_cast<Eigen::Index>(n_components) > std::min(n, d))
        throw UsageError("pca: n_components must be in [1, min(samples, dim)]");
    PcaResult r;
    r.mean = data.colwise().mean().transpose();
    const Eigen::MatrixXd centered = data.rowwise() - r.mean.transpose();
    SvdResult svd = full_svd_oracle(centered);
    const auto nc = static_cast<Eigen::Index>(n_components);
    r.components = svd.V.leftCols(nc);
    Eigen::MatrixXd unused(0, 0);
    apply_sign_convention(r.components, unused);
    r.projections = centered * r.components;

    const double denom = static_cast<double>(n - 1);
    const Eigen::VectorXd all_var = svd.S.array().square() / denom;
    const double total = all_var.sum();
    r.explained_variance = all_var.head(nc);
    r.explained_ratio = total > 0.0 ? Eigen::VectorXd(r.explained_variance / total) : Eigen::VectorXd::Zero(nc);
    const double tiny = static_cast<double>(std::max(n, d)) * std::numeric_limits<double>::epsilon() * svd.S(0);
    for (Eigen::Index i = 0; i < nc; ++i) r.zero_variance.push_back(!(svd.S(i) > tiny));
    return r;
}

std::vector<float> probe_direction(const ActivationTrace& pos, const ActivationTrace& neg, uint32_t layer,
                                   std::optional<uint64_t> token_position) {
    if (pos.header.d_model != neg.header.d_model) throw ShapeError("probe: traces differ in d_model");
    if (layer >= pos.header.n_layers || layer >= neg.header.n_layers) throw ShapeError("probe: layer out of range");
    const uint64_t pp = position_of(pos, token_position);
    const uint64_t pn = position_of(neg, token_position);
    if (pp >= pos.tokens.size() || pn >= neg.tokens.size()) throw ShapeError("probe: token position out of range");
    const auto a = pos.tokens[pp].layer(layer);
    const auto b = neg.tokens[pn].layer(layer);
    std::vector<double> diff(a.size());
    double n2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        diff[i] = double(a[i]) - double(b[i]);
        n2 += diff[i] * diff[i];
    }
    if (n2 == 0.0) throw NumericError("probe: zero difference between contrasting activations");
    const double norm = std::sqrt(n2);
    std::vector<float> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = static_cast<float>(diff[i] / norm);
    return out;
}

VectorBundle probe_bundle(std::span<const float> direction, uint32_t layer, uint32_t n_layers, std::string id) {
    VectorBundle b;
    b.base_id = id;
    b.post_id = std::move(id);
    b.d_model = static_cast<uint32_t>(direction.size());
    b.n_layers = n_layers;
    b.k = 1;
    b.subtract = true;
    BehavioralVector v;
    v.layer = layer;
    v.site = Site::probe;
    v.index = 0;
    v.sigma = 1.0;
    v.u.assign(direction.begin(), direction.end());
    b.vectors.push_back(std::move(v));
    validate_bundle(b);
    return b;
}

void validate_dist(const CategoricalDist& p) {
    double sum = 0.0;
    for (double x : p) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw NumericError("distribution has a negative or non-finite entry");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw NumericError("distribution does not sum to 1");
}

double kl_divergence(const CategoricalDist& p, const CategoricalDist& q) {
    if (p.size() != q.size()) throw ShapeError("kl: supports differ in size");
    double kl = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
        kl += p[i] * std::log(p[i] / q[i]);
    }
    return std::max(kl, 0.0);
}

double median_kl(std::span<const CategoricalDist> a, std::span<const CategoricalDist> b, size_t samplings, uint64_t seed) {
    if (a.empty() || b.empty()) throw UsageError("median_kl: empty distribution set");
    if (samplings == 0) throw UsageError("median_kl: samplings must be >= 1");
    CounterRng rng(seed, RngStream::sampling);
    std::vector<double> kls;
    kls.reserve(samplings);
    for (size_t s = 0; s < samplings; ++s) {
        const auto& p = a[rng.below(a.size())];
        const auto& q = b[rng.below(b.size())];
        kls.push_back(kl_divergence(p, q));
    }
    std::sort(kls.begin(), kls.end());
    const auto rank = (kls.size() + 1) / 2; // ceil(0.5 * N)
    return kls[rank - 1];
}

std::vector<CategoricalDist> parse_dists(const std::string& text) {
    std::vector<CategoricalDist> out;
    try {
        const json j = json::parse(text);
        const auto vocab = j.at("vocab_size").get<size_t>();
        for (const auto& d : j.at("dists")) {
            auto p = d.get<CategoricalDist>();
            if (p.size() != vocab) throw FormatError("distribution length differs from vocab_size");
            validate_dist(p);
            out.push_back(std::move(p));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed distribution file: ") + e.what());
    }
    return out;
}

std::vector<CategoricalDist> read_dists(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_dists(ss.str());
}

} // namespace ww
