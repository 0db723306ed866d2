// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>

#include <Eigen/Dense>

#include "ww/checkpoint.hpp"

namespace ww {

// post - base, elementwise in f32.
Eigen::MatrixXf weight_delta(const LayerPair& pair);

struct SvdResult {
    Eigen::MatrixXd U; // m x r, orthonormal columns
    Eigen::VectorXd S; // r, non-increasing
    Eigen::MatrixXd V; // n x r, orthonormal columns
};

// Dense one-sided Jacobi SVD (thin, r = min(m, n)). Deterministic; intended
// as a reference for matrices with min(m, n) <= 512. Columns follow the
// sign convention of apply_sign_convention.
SvdResult full_svd_oracle(const Eigen::MatrixXd& M);

inline constexpr Eigen::Index kOracleMaxDim = 512;

// Flip column pairs so each column of U has its largest-magnitude entry
// positive (ties: lowest row index).
void apply_sign_convention(Eigen::MatrixXd& U, Eigen::MatrixXd& V);

struct TruncatedSvdOptions {
    size_t k = 20;
    size_t oversample = 8;
    size_t power_iters = 4;
    uint64_t seed = 0;
    uint64_t substream = 0;
    // Extra subspace iterations run only while the top-k residual
    // max_i |M v_i - s_i u_i| exceeds refine_tol * s_0.
    size_t max_refine_iters = 400;
    double refine_tol = 1e-12;
};

struct TruncatedSvd {
    Eigen::MatrixXd U; // m x k_eff
    Eigen::VectorXd S; // k_eff
    Eigen::MatrixXd V; // n x k_eff
    size_t requested_k = 0;
    size_t numerical_rank = 0; // of the sketch, capped at k + oversample
    bool truncated = false;    // k_eff < requested_k
    size_t iterations = 0;     // power + refinement iterations performed
    bool converged = true;
    double residual = 0.0;     // final max_i |M v_i - s_i u_i| / s_0
};

// Randomized range finder with oversampling and subspace iteration, then a
// dense SVD of the projected matrix. Singular values at or below
// max(m, n) * FLT_EPSILON * s_0 are treated as zero (inputs originate from
// f32 weights); directions beyond that rank are dropped and `truncated` set.
TruncatedSvd truncated_svd(const Eigen::MatrixXd& M, const TruncatedSvdOptions& opts);

// Largest principal angle (radians) between the column spans of two
// matrices with orthonormal columns, computed from the sine side for accuracy.
double max_principal_angle(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

} // namespace ww
