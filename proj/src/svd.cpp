// SPDX-License-Identifier: Apache-2.0
#include "ww/svd.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <numeric>

#include "ww/rng.hpp"

namespace ww {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

Eigen::MatrixXf weight_delta(const LayerPair& pair) {
    if (pair.base.rows() != pair.post.rows() || pair.base.cols() != pair.post.cols())
        throw ShapeError("weight_delta: base and post shapes differ");
    return pair.post - pair.base;
}

namespace {

void require_finite(const MatrixXd& M, const char* what) {
    if (!M.allFinite()) throw NumericError(std::string(what) + ": matrix has non-finite entries");
}

MatrixXd orthonormalize(const MatrixXd& X) {
    Eigen::HouseholderQR<MatrixXd> qr(X);
    return qr.householderQ() * MatrixXd::Identity(X.rows(), X.cols());
}

// Hestenes one-sided Jacobi on a square or tall matrix (rows >= cols).
SvdResult jacobi_tall(const MatrixXd& A) {
    const Index m = A.rows();
    const Index n = A.cols();
    MatrixXd Q;
    MatrixXd W;
    if (m > n) {
        Eigen::HouseholderQR<MatrixXd> qr(A);
        Q = qr.householderQ() * MatrixXd::Identity(m, n);
        W = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
    } else {
        W = A;
    }
    MatrixXd V = MatrixXd::Identity(n, n);
    VectorXd norms(n);
    for (Index j = 0; j < n; ++j) norms(j) = W.col(j).squaredNorm();

    const double tol = static_cast<double>(std::max<Index>(n, 1)) * DBL_EPSILON;
    for (int sweep = 0; sweep < 80; ++sweep) {
        bool rotated = false;
        for (Index p = 0; p + 1 < n; ++p) {
            for (Index q = p + 1; q < n; ++q) {
                const double alpha = norms(p);
                const double beta = norms(q);
                if (alpha == 0.0 || beta == 0.0) continue;
                const double gamma = W.col(p).dot(W.col(q));
                if (std::abs(gamma) <= tol * std::sqrt(alpha) * std::sqrt(beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (Index i = 0; i < W.rows(); ++i) {
                    const double wp = W(i, p);
                    const double wq = W(i, q);
                    W(i, p) = c * wp - s * wq;
                    W(i, q) = s * wp + c * wq;
                }
                for (Index i = 0; i < n; ++i) {
                    const double vp = V(i, p);
                    const double vq = V(i, q);
                    V(i, p) = c * vp - s * vq;
                    V(i, q) = s * vp + c * vq;
                }
                norms(p) = alpha - t * gamma;
                norms(q) = beta + t * gamma;
            }
        }
        for (Index j = 0; j < n; ++j) norms(j) = W.col(j).squaredNorm();
        if (!rotated) break;
    }

    std::vector<Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    VectorXd sig(n);
    for (Index j = 0; j < n; ++j) sig(j) = std::sqrt(norms(j));
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return sig(a) > sig(b); });

    const Index w_rows = W.rows();
    SvdResult out;
    out.U = MatrixXd::Zero(w_rows, n);
    out.S = VectorXd::Zero(n);
    out.V = MatrixXd::Zero(n, n);
    std::vector<Index> empty_slots;
    for (Index j = 0; j < n; ++j) {
        const Index src = order[static_cast<size_t>(j)];
        out.S(j) = sig(src);
        out.V.col(j) = V.col(src);
        if (sig(src) > 0.0) out.U.col(j) = W.col(src) / sig(src);
        else empty_slots.push_back(j);
    }
    // Complete U with unit vectors orthogonal to the filled columns.
    Index probe = 0;
    for (Index slot : empty_slots) {
        while (probe < w_rows) {
            VectorXd v = VectorXd::Unit(w_rows, probe++);
            for (int pass = 0; pass < 2; ++pass) {
                for (Index j = 0; j < n; ++j) {
                    if (j == slot || out.U.col(j).squaredNorm() == 0.0) continue;
                    v -= out.U.col(j).dot(v) * out.U.col(j);
                }
            }
            const double norm = v.norm();
            if (norm > 0.5) {
                out.U.col(slot) = v / norm;
                break;
            }
        }
    }
    if (m > n) out.U = Q * out.U;
    return out;
}

SvdResult jacobi_svd(const MatrixXd& M) {
    if (M.rows() >= M.cols()) return jacobi_tall(M);
    SvdResult t = jacobi_tall(M.transpose());
    return {std::move(t.V), std::move(t.S), std::move(t.U)};
}

double residual_max(const MatrixXd& M, const MatrixXd& U, const VectorXd& S, const MatrixXd& V, Index k) {
    if (k == 0) return 0.0;
    const MatrixXd MV = M * V.leftCols(k);
    double worst = 0.0;
    for (Index i = 0; i < k; ++i) worst = std::max(worst, (MV.col(i) - S(i) * U.col(i)).norm());
    return worst;
}

} // namespace

void apply_sign_convention(MatrixXd& U, MatrixXd& V) {
    for (Index j = 0; j < U.cols(); ++j) {
        Index best = 0;
        double best_abs = -1.0;
        for (Index i = 0; i < U.rows(); ++i) {
            const double a = std::abs(U(i, j));
            if (a > best_abs) {
                best_abs = a;
                best = i;
            }
        }
        if (U.rows() > 0 && U(best, j) < 0.0) {
            U.col(j) = -U.col(j);
            if (j < V.cols()) V.col(j) = -V.col(j);
        }
    }
}

SvdResult full_svd_oracle(const MatrixXd& M) {
    if (M.rows() == 0 || M.cols() == 0) throw ShapeError("full_svd_oracle: empty matrix");
    if (std::min(M.rows(), M.cols()) > kOracleMaxDim)
        throw UsageError("full_svd_oracle: matrix too large (min dimension " + std::to_string(std::min(M.rows(), M.cols())) + " > 512)");
    require_finite(M, "full_svd_oracle");
    SvdResult r = jacobi_svd(M);
    apply_sign_convention(r.U, r.V);
    return r;
}

TruncatedSvd truncated_svd(const MatrixXd& M, const TruncatedSvdOptions& opts) {
    if (opts.k == 0) throw UsageError("truncated_svd: k must be >= 1");
    if (M.rows() == 0 || M.cols() == 0) throw ShapeError("truncated_svd: empty matrix");
    require_finite(M, "truncated_svd");

    const Index m = M.rows();
    const Index n = M.cols();
    const Index r_max = std::min(m, n);
    const Index k_c = std::min<Index>(static_cast<Index>(opts.k), r_max);
    const Index l = std::min<Index>(k_c + static_cast<Index>(opts.oversample), r_max);

    CounterRng rng(opts.seed, RngStream::sketch, opts.substream);
    MatrixXd omega(n, l);
    for (Index j = 0; j < l; ++j)
        for (Index i = 0; i < n; ++i) omega(i, j) = rng.normal();

    TruncatedSvd out;
    out.requested_k = opts.k;

    MatrixXd Q = orthonormalize(M * omega);
    auto subspace_step = [&] { Q = orthonormalize(M * orthonormalize(M.transpose() * Q)); };
    for (size_t i = 0; i < opts.power_iters; ++i) subspace_step();
    out.iterations = opts.power_iters;

    SvdResult small;
    MatrixXd U;
    Index k_eff = 0;
    double prev = HUGE_VAL;
    int stalled = 0;
    for (size_t refine = 0;; ++refine) {
        const MatrixXd B = Q.transpose() * M;
        small = jacobi_svd(B);
        U = Q * small.U;
        const double s0 = small.S(0);
        if (!(s0 > 0.0)) {
            k_eff = 0;
            out.residual = 0.0;
            out.numerical_rank = 0;
            break;
        }
        const double rank_tol = static_cast<double>(std::max(m, n)) * FLT_EPSILON * s0;
        Index rank = 0;
        while (rank < small.S.size() && small.S(rank) > rank_tol) ++rank;
        out.numerical_rank = static_cast<size_t>(rank);
        k_eff = std::min(k_c, rank);
        out.residual = residual_max(M, U, small.S, small.V, k_eff) / s0;
        if (out.residual <= opts.refine_tol) break;
        // Stagnation means the gap at k is too small for iteration to help.
        stalled = out.residual > 0.99 * prev ? stalled + 1 : 0;
        prev = out.residual;
        if (refine >= opts.max_refine_iters || stalled >= 10) {
            out.converged = false;
            break;
        }
        subspace_step();
        ++out.iterations;
    }

    out.U = U.leftCols(k_eff);
    out.S = small.S.head(k_eff);
    out.V = small.V.leftCols(k_eff);
    apply_sign_convention(out.U, out.V);
    out.truncated = static_cast<size_t>(k_eff) < opts.k;
    return out;
}

double max_principal_angle(const MatrixXd& A, const MatrixXd& B) {
    if (A.rows() != B.rows() || A.cols() != B.cols())
        throw ShapeError("max_principal_angle: subspace shapes differ");
    if (A.cols() == 0) return 0.0;
    const MatrixXd R = B - A * (A.transpose() * B);
    const SvdResult r = jacobi_svd(R);
    return std::asin(std::min(1.0, r.S(0)));
}

} // namespace ww
