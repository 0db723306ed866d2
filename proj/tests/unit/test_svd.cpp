// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"
#include "ww/svd.hpp"

using namespace ww;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

double ortho_error(const MatrixXd& Q) {
    return (Q.transpose() * Q - MatrixXd::Identity(Q.cols(), Q.cols())).cwiseAbs().maxCoeff();
}

bool follows_sign_convention(const MatrixXd& U) {
    for (Eigen::Index j = 0; j < U.cols(); ++j) {
        Eigen::Index best = 0;
        for (Eigen::Index i = 1; i < U.rows(); ++i)
            if (std::abs(U(i, j)) > std::abs(U(best, j))) best = i;
        if (U(best, j) < 0.0) return false;
    }
    return true;
}

} // namespace

TEST_CASE("weight_delta") {
    wwtest::TestRng rng(11);
    LayerPair pair;
    pair.base = wwtest::gaussian(rng, 8, 8).cast<float>();
    SUBCASE("identical weights give zero") {
        pair.post = pair.base;
        CHECK(weight_delta(pair).cwiseAbs().maxCoeff() == 0.0f);
    }
    SUBCASE("rank-1 construction") {
        const VectorXd u = wwtest::unit(wwtest::gaussian(rng, 8, 1).col(0));
        const VectorXd v = wwtest::unit(wwtest::gaussian(rng, 8, 1).col(0));
        pair.post = (pair.base.cast<double>() + 2.0 * u * v.transpose()).cast<float>();
        const SvdResult r = full_svd_oracle(weight_delta(pair).cast<double>());
        CHECK(r.S(0) == doctest::Approx(2.0).epsilon(1e-5));
        CHECK(r.S(1) < 1e-5);
    }
    SUBCASE("random pair matches elementwise subtraction") {
        pair.post = wwtest::gaussian(rng, 8, 8).cast<float>();
        const Eigen::MatrixXf d = weight_delta(pair);
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) REQUIRE(d(i, j) == pair.post(i, j) - pair.base(i, j));
    }
    SUBCASE("shape mismatch") {
        pair.post = Eigen::MatrixXf::Zero(8, 7);
        CHECK_THROWS_AS(weight_delta(pair), ShapeError);
    }
}

TEST_CASE("full_svd_oracle") {
    SUBCASE("identity") {
        const SvdResult r = full_svd_oracle(MatrixXd::Identity(4, 4));
        CHECK((r.S - VectorXd::Ones(4)).cwiseAbs().maxCoeff() < 1e-15);
    }
    SUBCASE("zero matrix") {
        const SvdResult r = full_svd_oracle(MatrixXd::Zero(5, 3));
        CHECK(r.S.size() == 3);
        CHECK(r.S.cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("random shapes reconstruct and agree with Eigen") {
        wwtest::TestRng rng(5);
        for (auto [m, n] : {std::pair{16, 16}, {30, 7}, {7, 30}, {1, 9}, {9, 1}, {64, 48}}) {
            const MatrixXd M = wwtest::gaussian(rng, m, n);
            const SvdResult r = full_svd_oracle(M);
            CHECK(ortho_error(r.U) < 1e-10);
            CHECK(ortho_error(r.V) < 1e-10);
            CHECK((M - r.U * r.S.asDiagonal() * r.V.transpose()).norm() <= 1e-8 * M.norm());
            for (Eigen::Index i = 1; i < r.S.size(); ++i) CHECK(r.S(i) <= r.S(i - 1));
            Eigen::JacobiSVD<MatrixXd> ref(M);
            CHECK((r.S - ref.singularValues()).cwiseAbs().maxCoeff() <= 1e-12 * ref.singularValues()(0));
            CHECK(follows_sign_convention(r.U));
        }
    }
    SUBCASE("rank-deficient input keeps orthonormal factors") {
        wwtest::TestRng rng(6);
        const MatrixXd M = wwtest::gaussian(rng, 12, 3) * wwtest::gaussian(rng, 3, 10);
        const SvdResult r = full_svd_oracle(M);
        CHECK(ortho_error(r.U) < 1e-10);
        CHECK(ortho_error(r.V) < 1e-10);
        CHECK(r.S(3) < 1e-12 * r.S(0));
        CHECK((M - r.U * r.S.asDiagonal() * r.V.transpose()).norm() <= 1e-8 * M.norm());
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(full_svd_oracle(MatrixXd(0, 3)), ShapeError);
        CHECK_THROWS_AS(full_svd_oracle(MatrixXd::Zero(513, 513)), UsageError);
        MatrixXd bad = MatrixXd::Identity(3, 3);
        bad(1, 2) = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(full_svd_oracle(bad), NumericError);
    }
}

TEST_CASE("truncated_svd examples") {
    TruncatedSvdOptions opts;
    SUBCASE("diag(3,2,1), k=2") {
        opts.k = 2;
        const TruncatedSvd t = truncated_svd(VectorXd((VectorXd(3) << 3, 2, 1).finished()).asDiagonal().toDenseMatrix(), opts);
        REQUIRE(t.S.size() == 2);
        CHECK(t.S(0) == doctest::Approx(3.0).epsilon(1e-14));
        CHECK(t.S(1) == doctest::Approx(2.0).epsilon(1e-14));
        CHECK((t.U - MatrixXd::Identity(3, 2)).cwiseAbs().maxCoeff() < 1e-12);
        CHECK_FALSE(t.truncated);
    }
    SUBCASE("5 u v^T, k=1") {
        wwtest::TestRng rng(9);
        const VectorXd u = wwtest::unit(wwtest::gaussian(rng, 20, 1).col(0));
        const VectorXd v = wwtest::unit(wwtest::gaussian(rng, 15, 1).col(0));
        opts.k = 1;
        const TruncatedSvd t = truncated_svd(5.0 * u * v.transpose(), opts);
        REQUIRE(t.S.size() == 1);
        CHECK(t.S(0) == doctest::Approx(5.0).epsilon(1e-12));
        CHECK(std::abs(t.U.col(0).dot(u)) >= 1.0 - 1e-9);
    }
    SUBCASE("random 64x48, k=20 matches the dense oracle") {
        wwtest::TestRng rng(21);
        const MatrixXd M = wwtest::gaussian(rng, 64, 48);
        opts.k = 20;
        const TruncatedSvd t = truncated_svd(M, opts);
        const SvdResult ref = full_svd_oracle(M);
        REQUIRE(t.S.size() == 20);
        for (int i = 0; i < 20; ++i) CHECK(std::abs(t.S(i) - ref.S(i)) <= 1e-6 * ref.S(i));
        CHECK(max_principal_angle(ref.U.leftCols(20), t.U) <= 1e-6);
        CHECK(wwtest::max_angle_eigen(ref.U.leftCols(20), t.U) <= 1e-6);
        CHECK(ortho_error(t.U) < 1e-12);
        CHECK(follows_sign_convention(t.U));
    }
}

TEST_CASE("truncated_svd rank handling and errors") {
    TruncatedSvdOptions opts;
    SUBCASE("k above rank truncates") {
        wwtest::TestRng rng(4);
        const MatrixXd M = wwtest::gaussian(rng, 30, 3) * wwtest::gaussian(rng, 3, 25);
        opts.k = 10;
        const TruncatedSvd t = truncated_svd(M, opts);
        CHECK(t.truncated);
        CHECK(t.S.size() == 3);
        CHECK(t.requested_k == 10);
        CHECK(t.numerical_rank == 3);
    }
    SUBCASE("k above min dimension") {
        wwtest::TestRng rng(4);
        opts.k = 50;
        const TruncatedSvd t = truncated_svd(wwtest::gaussian(rng, 6, 40), opts);
        CHECK(t.S.size() == 6);
        CHECK(t.truncated);
    }
    SUBCASE("zero matrix yields no directions") {
        const TruncatedSvd t = truncated_svd(MatrixXd::Zero(10, 10), opts);
        CHECK(t.S.size() == 0);
        CHECK(t.U.cols() == 0);
        CHECK(t.truncated);
    }
    SUBCASE("errors") {
        opts.k = 0;
        CHECK_THROWS_AS(truncated_svd(MatrixXd::Identity(3, 3), opts), UsageError);
        opts.k = 1;
        CHECK_THROWS_AS(truncated_svd(MatrixXd(0, 0), opts), ShapeError);
        MatrixXd bad = MatrixXd::Identity(3, 3);
        bad(0, 0) = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(truncated_svd(bad, opts), NumericError);
    }
}

TEST_CASE("truncated_svd is deterministic per seed") {
    wwtest::TestRng rng(77);
    const MatrixXd M = wwtest::gaussian(rng, 40, 90);
    TruncatedSvdOptions opts;
    opts.k = 5;
    opts.seed = 3;
    const TruncatedSvd a = truncated_svd(M, opts);
    const TruncatedSvd b = truncated_svd(M, opts);
    CHECK(a.U == b.U);
    CHECK(a.S == b.S);
}

TEST_CASE("truncated_svd gap property over random spectra") {
    wwtest::TestRng rng(1234);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::Index m = 20 + static_cast<Eigen::Index>(rng.below(60));
        const Eigen::Index n = 20 + static_cast<Eigen::Index>(rng.below(80));
        const Eigen::Index p = std::min(m, n);
        const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(p / 2)));
        VectorXd s(p);
        for (Eigen::Index i = 0; i < p; ++i) s(i) = std::pow(0.97, double(i)) * (i < k ? 1.1 : 1.0);
        const MatrixXd M = wwtest::with_spectrum(rng, m, n, s);
        TruncatedSvdOptions opts;
        opts.k = static_cast<size_t>(k);
        opts.seed = static_cast<uint64_t>(trial);
        const TruncatedSvd t = truncated_svd(M, opts);
        const SvdResult ref = full_svd_oracle(M);
        REQUIRE(t.S.size() == k);
        for (Eigen::Index i = 0; i < k; ++i) CHECK(std::abs(t.S(i) - ref.S(i)) <= 1e-6 * ref.S(i));
        CHECK(wwtest::max_angle_eigen(ref.U.leftCols(k), t.U) <= 1e-6);
    }
}

TEST_CASE("max_principal_angle") {
    for (double theta : {0.0, 1e-7, 1e-3, 0.5, 1.2}) {
        MatrixXd A = MatrixXd::Zero(3, 1);
        A(0, 0) = 1.0;
        MatrixXd B = MatrixXd::Zero(3, 1);
        B(0, 0) = std::cos(theta);
        B(1, 0) = std::sin(theta);
        CHECK(max_principal_angle(A, B) == doctest::Approx(theta).epsilon(1e-9));
    }
    CHECK_THROWS_AS(max_principal_angle(MatrixXd::Identity(3, 2), MatrixXd::Identity(3, 1)), ShapeError);
}
