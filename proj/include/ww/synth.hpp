// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ww/checkpoint.hpp"
#include "ww/trace.hpp"

namespace ww {

// Residual toy network with two write sites per layer:
//   a(l+1) = a(l) + O(l) tanh(A(l) a(l)) + D(l) tanh(U(l) a(l))
// O plays the attention output projection, D the MLP down projection.
struct ToyModel {
    struct Layer {
        Eigen::MatrixXf A; // d_ff x d_model
        Eigen::MatrixXf O; // d_model x d_ff
        Eigen::MatrixXf U; // d_ff x d_model
        Eigen::MatrixXf D; // d_model x d_ff
        bool operator==(const Layer&) const = default;
    };

    uint32_t d_model = 0;
    uint32_t d_ff = 0;
    uint64_t seed = 0;
    std::vector<Layer> layers;

    uint32_t n_layers() const { return static_cast<uint32_t>(layers.size()); }
    Eigen::MatrixXf& site_matrix(uint32_t layer, Site site);
    const Eigen::MatrixXf& site_matrix(uint32_t layer, Site site) const;

    // Names follow the "toy" naming preset (layers.{l}.attn_out, ...).
    TensorMap to_checkpoint(DType dtype = DType::f32) const;
    static ToyModel from_checkpoint(const TensorMap& tensors);

    // Post-layer residuals, n_layers x d_model (row l = after layer l).
    Eigen::MatrixXd forward(const Eigen::VectorXd& x) const;

    bool operator==(const ToyModel& o) const {
        return d_model == o.d_model && d_ff == o.d_ff && layers == o.layers;
    }
};

// Gaussian weights scaled by 1/sqrt(fan_in); matrix m of layer l draws from
// stream (weights, 4l + m) in row-major order with m = A, O, U, D.
ToyModel make_toy_model(uint64_t seed, uint32_t n_layers, uint32_t d_model, uint32_t d_ff);

struct PlantSpec {
    uint32_t layer = 0;
    Site site = Site::attn_out;
    std::vector<Eigen::VectorXd> a; // unit d_model vectors, orthonormal
    std::vector<Eigen::VectorXd> b; // unit d_ff vectors, orthonormal
    std::vector<double> scales;     // positive and distinct
};

struct PlantTruth {
    uint32_t layer = 0;
    Site site = Site::attn_out;
    std::vector<Eigen::VectorXd> a;
    std::vector<double> scales;
};

// Random orthonormal a_j, b_j (stream plant) for the given scales.
PlantSpec random_plant(uint64_t seed, const ToyModel& model, uint32_t layer, Site site, std::vector<double> scales);

// model' = model with sum_j c_j a_j b_j^T added at (layer, site).
std::pair<ToyModel, PlantTruth> plant_update(const ToyModel& model, const PlantSpec& spec);

struct Anomaly {
    Eigen::VectorXd direction;     // unit, d_model
    double magnitude = 0.0;
    std::optional<uint32_t> layer; // inject after this layer; nullopt = at the input
};

struct TokenInput {
    Eigen::VectorXd x;
    Role role = Role::user;
};

ActivationTrace gen_activation_stream(const ToyModel& model, const std::vector<TokenInput>& inputs,
                                      const std::optional<Anomaly>& anomaly = std::nullopt,
                                      const std::string& model_id = "toy");

// Generic inputs: x ~ N(0, I / d_model), so |x| is about 1.
std::vector<Eigen::VectorXd> gen_generic_inputs(uint64_t seed, size_t count, uint32_t d_model, uint64_t substream = 0);

// T explicit gradient steps of f_t(z) = 1/2 |z - z*_t|^2 on z = M v.
// `targets` holds T entries, or one entry reused for every step.
Eigen::MatrixXd gd_single_sample(const Eigen::MatrixXd& M0, const Eigen::VectorXd& v,
                                 const std::vector<Eigen::VectorXd>& targets, double eta, size_t T);

} // namespace ww
