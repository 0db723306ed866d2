// SPDX-License-Identifier: Apache-2.0
#include "ww/synth.hpp"

#include <cmath>
#include <set>

#include "ww/rng.hpp"

namespace ww {

using Eigen::MatrixXd;
using Eigen::MatrixXf;
using Eigen::VectorXd;

namespace {

MatrixXf gaussian_matrix(uint64_t seed, uint64_t substream, Eigen::Index rows, Eigen::Index cols, double scale) {
    CounterRng rng(seed, RngStream::weights, substream);
    MatrixXf m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<float>(rng.normal() * scale);
    return m;
}

Tensor matrix_tensor(const MatrixXf& m, DType dtype) {
    using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const RowMajor rm = m;
    return Tensor::from_f32({rm.rows(), rm.cols()}, std::span<const float>(rm.data(), static_cast<size_t>(rm.size())), dtype);
}

std::string toy_name(uint32_t layer, const char* what) {
    return "layers." + std::to_string(layer) + "." + what;
}

VectorXd tanh_vec(const VectorXd& v) {
    return v.array().tanh().matrix();
}

MatrixXd orthonormal_columns(uint64_t seed, uint64_t substream, Eigen::Index rows, Eigen::Index cols) {
    CounterRng rng(seed, RngStream::plant, substream);
    MatrixXd g(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) g(i, j) = rng.normal();
    Eigen::HouseholderQR<MatrixXd> qr(g);
    return qr.householderQ() * MatrixXd::Identity(rows, cols);
}

} // namespace

MatrixXf& ToyModel::site_matrix(uint32_t layer, Site site) {
    if (layer >= layers.size()) throw ShapeError("layer out of range");
    if (site == Site::attn_out) return layers[layer].O;
    if (site == Site::mlp_down) return layers[layer].D;
    throw UsageError("toy model has no probe site");
}

const MatrixXf& ToyModel::site_matrix(uint32_t layer, Site site) const {
    return const_cast<ToyModel*>(this)->site_matrix(layer, site);
}

TensorMap ToyModel::to_checkpoint(DType dtype) const {
    TensorMap out;
    for (uint32_t l = 0; l < n_layers(); ++l) {
        out[toy_name(l, "attn_in")] = matrix_tensor(layers[l].A, dtype);
        out[toy_name(l, "attn_out")] = matrix_tensor(layers[l].O, dtype);
        out[toy_name(l, "mlp_up")] = matrix_tensor(layers[l].U, dtype);
        out[toy_name(l, "mlp_down")] = matrix_tensor(layers[l].D, dtype);
    }
    return out;
}

ToyModel ToyModel::from_checkpoint(const TensorMap& tensors) {
    ToyModel m;
    for (uint32_t l = 0; tensors.contains(toy_name(l, "attn_out")); ++l) {
        auto get = [&](const char* what) {
            auto it = tensors.find(toy_name(l, what));
            if (it == tensors.end()) throw ShapeError("missing tensor '" + toy_name(l, what) + "'");
            return tensor_to_matrix(it->second);
        };
        Layer layer{get("attn_in"), get("attn_out"), get("mlp_up"), get("mlp_down")};
        if (l == 0) {
            m.d_model = static_cast<uint32_t>(layer.O.rows());
            m.d_ff = static_cast<uint32_t>(layer.O.cols());
        }
        const auto dm = static_cast<Eigen::Index>(m.d_model), df = static_cast<Eigen::Index>(m.d_ff);
        if (layer.A.rows() != df || layer.A.cols() != dm || layer.O.rows() != dm || layer.O.cols() != df ||
            layer.U.rows() != df || layer.U.cols() != dm || layer.D.rows() != dm || layer.D.cols() != df)
            throw ShapeError("toy checkpoint layer " + std::to_string(l) + " has inconsistent shapes");
        m.layers.push_back(std::move(layer));
    }
    if (m.layers.empty()) throw ShapeError("checkpoint holds no toy-model layers");
    return m;
}

MatrixXd ToyModel::forward(const VectorXd& x) const {
    if (x.size() != static_cast<Eigen::Index>(d_model)) throw ShapeError("forward: input length != d_model");
    MatrixXd out(n_layers(), d_model);
    VectorXd a = x;
    for (uint32_t l = 0; l < n_layers(); ++l) {
        const auto& L = layers[l];
        a = a + L.O.cast<double>() * tanh_vec(L.A.cast<double>() * a) + L.D.cast<double>() * tanh_vec(L.U.cast<double>() * a);
        out.row(l) = a.transpose();
    }
    return out;
}

ToyModel make_toy_model(uint64_t seed, uint32_t n_layers, uint32_t d_model, uint32_t d_ff) {
    if (n_layers < 1) throw UsageError("toy model needs at least one layer");
    if (d_model < 2 || d_ff < 2) throw UsageError("toy model dims must be >= 2");
    ToyModel m;
    m.d_model = d_model;
    m.d_ff = d_ff;
    m.seed = seed;
    const double in_model = 1.0 / std::sqrt(double(d_model));
    const double in_ff = 1.0 / std::sqrt(double(d_ff));
    for (uint32_t l = 0; l < n_layers; ++l) {
        const uint64_t s = uint64_t{4} * l;
        m.layers.push_back({gaussian_matrix(seed, s + 0, d_ff, d_model, in_model),
                            gaussian_matrix(seed, s + 1, d_model, d_ff, in_ff),
                            gaussian_matrix(seed, s + 2, d_ff, d_model, in_model),
                            gaussian_matrix(seed, s + 3, d_model, d_ff, in_ff)});
    }
    return m;
}

PlantSpec random_plant(uint64_t seed, const ToyModel& model, uint32_t layer, Site site, std::vector<double> scales) {
    const auto r = static_cast<Eigen::Index>(scales.size());
    PlantSpec spec;
    spec.layer = layer;
    spec.site = site;
    spec.scales = std::move(scales);
    const uint64_t sub = uint64_t{layer} * 4 + static_cast<uint64_t>(site);
    const MatrixXd a = orthonormal_columns(seed, 2 * sub, model.d_model, r);
    const MatrixXd b = orthonormal_columns(seed, 2 * sub + 1, model.d_ff, r);
    for (Eigen::Index j = 0; j < r; ++j) {
        spec.a.push_back(a.col(j));
        spec.b.push_back(b.col(j));
    }
    return spec;
}

std::pair<ToyModel, PlantTruth> plant_update(const ToyModel& model, const PlantSpec& spec) {
    const size_t r = spec.scales.size();
    if (spec.a.size() != r || spec.b.size() != r) throw ShapeError("plant: direction and scale counts differ");
    if (spec.layer >= model.n_layers()) throw ShapeError("plant: layer out of range");
    const MatrixXf& target = model.site_matrix(spec.layer, spec.site);
    std::set<double> distinct;
    for (size_t j = 0; j < r; ++j) {
        if (spec.a[j].size() != target.rows() || spec.b[j].size() != target.cols())
            throw ShapeError("plant: direction dimensions do not match the site matrix");
        if (!(spec.scales[j] > 0.0)) throw UsageError("plant: scales must be positive");
        distinct.insert(spec.scales[j]);
        for (size_t i = 0; i <= j; ++i) {
            const double want = i == j ? 1.0 : 0.0;
            if (std::abs(spec.a[i].dot(spec.a[j]) - want) > 1e-9 || std::abs(spec.b[i].dot(spec.b[j]) - want) > 1e-9)
                throw UsageError("plant: directions must be orthonormal");
        }
    }
    if (distinct.size() != r) throw UsageError("plant: scales must be distinct");

    ToyModel out = model;
    if (r > 0) {
        MatrixXd delta = MatrixXd::Zero(target.rows(), target.cols());
        for (size_t j = 0; j < r; ++j) delta += spec.scales[j] * spec.a[j] * spec.b[j].transpose();
        MatrixXf& w = out.site_matrix(spec.layer, spec.site);
        w = (w.cast<double>() + delta).cast<float>();
    }
    return {std::move(out), PlantTruth{spec.layer, spec.site, spec.a, spec.scales}};
}

ActivationTrace gen_activation_stream(const ToyModel& model, const std::vector<TokenInput>& inputs,
                                      const std::optional<Anomaly>& anomaly, const std::string& model_id) {
    if (anomaly) {
        if (anomaly->direction.size() != static_cast<Eigen::Index>(model.d_model)) throw ShapeError("anomaly direction length != d_model");
        if (anomaly->layer && *anomaly->layer >= model.n_layers()) throw ShapeError("anomaly layer out of range");
    }
    ActivationTrace trace;
    trace.header.model_id = model_id;
    trace.header.n_layers = model.n_layers();
    trace.header.d_model = model.d_model;
    for (const auto& in : inputs) {
        if (in.x.size() != static_cast<Eigen::Index>(model.d_model)) throw ShapeError("input length != d_model");
        VectorXd a = in.x;
        if (anomaly && !anomaly->layer) a += anomaly->magnitude * anomaly->direction;
        TokenRecord rec;
        rec.role = in.role;
        rec.d_model = model.d_model;
        rec.values.resize(size_t{model.n_layers()} * model.d_model);
        for (uint32_t l = 0; l < model.n_layers(); ++l) {
            const auto& L = model.layers[l];
            a = a + L.O.cast<double>() * tanh_vec(L.A.cast<double>() * a) + L.D.cast<double>() * tanh_vec(L.U.cast<double>() * a);
            if (anomaly && anomaly->layer && *anomaly->layer == l) a += anomaly->magnitude * anomaly->direction;
            if (!a.allFinite()) throw NumericError("non-finite activation at layer " + std::to_string(l));
            auto dst = rec.layer(l);
            for (uint32_t i = 0; i < model.d_model; ++i) dst[i] = static_cast<float>(a(i));
        }
        trace.tokens.push_back(std::move(rec));
    }
    trace.header.prompt_boundary = compute_prompt_boundary(trace.tokens);
    return trace;
}

std::vector<VectorXd> gen_generic_inputs(uint64_t seed, size_t count, uint32_t d_model, uint64_t substream) {
    CounterRng rng(seed, RngStream::inputs, substream);
    const double scale = 1.0 / std::sqrt(double(d_model));
    std::vector<VectorXd> out;
    out.reserve(count);
    for (size_t n = 0; n < count; ++n) {
        VectorXd x(d_model);
        for (uint32_t i = 0; i < d_model; ++i) x(i) = rng.normal() * scale;
        out.push_back(std::move(x));
    }
    return out;
}

MatrixXd gd_single_sample(const MatrixXd& M0, const VectorXd& v, const std::vector<VectorXd>& targets, double eta, size_t T) {
    if (T < 1) throw UsageError("gd_single_sample: T must be >= 1");
    if (v.size() != M0.cols()) throw ShapeError("gd_single_sample: v length != M0 columns");
    if (targets.size() != T && targets.size() != 1) throw UsageError("gd_single_sample: need T targets or one shared target");
    MatrixXd M = M0;
    for (size_t t = 0; t < T; ++t) {
        const VectorXd& target = targets.size() == 1 ? targets[0] : targets[t];
        if (target.size() != M0.rows()) throw ShapeError("gd_single_sample: target length != M0 rows");
        // d/dM of 1/2 |M v - z*|^2 is (M v - z*) v^T
        const VectorXd g = M * v - target;
        M.noalias() -= (eta * g) * v.transpose();
        if (!M.allFinite()) throw NumericError("gd_single_sample diverged at step " + std::to_string(t + 1));
    }
    return M;
}

} // namespace ww
