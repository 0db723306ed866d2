// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "ww/svd.hpp"
#include "ww/synth.hpp"

using namespace ww;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Independent forward: explicit loops, no Eigen products.
std::vector<std::vector<double>> forward_loops(const ToyModel& m, const VectorXd& x) {
    std::vector<double> a(x.data(), x.data() + x.size());
    std::vector<std::vector<double>> out;
    for (const auto& L : m.layers) {
        std::vector<double> next = a;
        std::vector<double> h1(m.d_ff), h2(m.d_ff);
        for (uint32_t r = 0; r < m.d_ff; ++r) {
            double s1 = 0, s2 = 0;
            for (uint32_t c = 0; c < m.d_model; ++c) {
                s1 += double(L.A(r, c)) * a[c];
                s2 += double(L.U(r, c)) * a[c];
            }
            h1[r] = std::tanh(s1);
            h2[r] = std::tanh(s2);
        }
        for (uint32_t r = 0; r < m.d_model; ++r)
            for (uint32_t c = 0; c < m.d_ff; ++c) next[r] += double(L.O(r, c)) * h1[c] + double(L.D(r, c)) * h2[c];
        a = next;
        out.push_back(a);
    }
    return out;
}

} // namespace

TEST_CASE("toy model determinism and export") {
    const ToyModel a = make_toy_model(11, 3, 8, 24);
    const ToyModel b = make_toy_model(11, 3, 8, 24);
    CHECK(a == b);
    CHECK_FALSE(a == make_toy_model(12, 3, 8, 24));
    CHECK(a.layers[0].A.rows() == 24);
    CHECK(a.layers[0].O.rows() == 8);

    const auto dir = wwtest::scratch_dir("synth_export");
    const auto path = (dir / "m.safetensors").string();
    write_checkpoint(a.to_checkpoint(), path);
    const ToyModel back = ToyModel::from_checkpoint(load_checkpoint(path));
    CHECK(back == a);

    // weight scale about 1/sqrt(fan_in)
    const ToyModel big = make_toy_model(1, 1, 64, 256);
    const double var = big.layers[0].A.cast<double>().squaredNorm() / double(big.layers[0].A.size());
    CHECK(var == doctest::Approx(1.0 / 64).epsilon(0.05));

    CHECK_THROWS_AS(make_toy_model(1, 0, 8, 8), UsageError);
    CHECK_THROWS_AS(make_toy_model(1, 1, 1, 8), UsageError);
}

TEST_CASE("forward on zero input is zero") {
    const ToyModel m = make_toy_model(2, 4, 8, 16);
    CHECK(m.forward(VectorXd::Zero(8)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("activation stream equals an independent forward") {
    const ToyModel m = make_toy_model(3, 4, 10, 20);
    const auto xs = gen_generic_inputs(3, 6, 10);
    std::vector<TokenInput> inputs;
    for (size_t i = 0; i < xs.size(); ++i) inputs.push_back({xs[i], i < 4 ? Role::user : Role::assistant});
    const ActivationTrace t = gen_activation_stream(m, inputs);
    CHECK(t.header.n_layers == 4);
    CHECK(t.header.prompt_boundary == 4);
    REQUIRE(t.tokens.size() == 6);
    for (size_t k = 0; k < 6; ++k) {
        const auto ref = forward_loops(m, xs[k]);
        for (uint32_t l = 0; l < 4; ++l)
            for (uint32_t i = 0; i < 10; ++i) CHECK(std::abs(t.tokens[k].layer(l)[i] - ref[l][i]) <= 1e-6 * (1 + std::abs(ref[l][i])));
    }
    CHECK(t.tokens[5].role == Role::assistant);

    const Anomaly zero{wwtest::unit(VectorXd::Ones(10)), 0.0, 2};
    CHECK(gen_activation_stream(m, inputs, zero) == t);
}

TEST_CASE("anomaly injection shifts the designated layer") {
    const ToyModel m = make_toy_model(4, 3, 6, 12);
    const auto xs = gen_generic_inputs(4, 1, 6);
    const VectorXd dir = wwtest::unit(VectorXd::LinSpaced(6, 1, 6));
    const ActivationTrace plain = gen_activation_stream(m, {{xs[0], Role::user}});
    const ActivationTrace hit = gen_activation_stream(m, {{xs[0], Role::user}}, Anomaly{dir, 5.0, 1});
    for (uint32_t i = 0; i < 6; ++i) {
        CHECK(hit.tokens[0].layer(0)[i] == plain.tokens[0].layer(0)[i]);
        CHECK(hit.tokens[0].layer(1)[i] == doctest::Approx(plain.tokens[0].layer(1)[i] + 5.0 * dir(i)).epsilon(1e-5));
    }
    CHECK_THROWS_AS(gen_activation_stream(m, {{xs[0], Role::user}}, Anomaly{dir, 1.0, 7}), ShapeError);
    CHECK_THROWS_AS(gen_activation_stream(m, {{VectorXd::Zero(5), Role::user}}), ShapeError);
}

TEST_CASE("plant_update") {
    const ToyModel m = make_toy_model(5, 3, 16, 32);
    SUBCASE("r = 0 leaves the model unchanged") {
        const auto [post, truth] = plant_update(m, random_plant(5, m, 1, Site::attn_out, {}));
        CHECK(post == m);
        CHECK(truth.a.empty());
    }
    SUBCASE("only the target site changes by the planted matrix") {
        const PlantSpec spec = random_plant(5, m, 2, Site::mlp_down, {4.0, 1.5});
        const auto [post, truth] = plant_update(m, spec);
        for (uint32_t l = 0; l < 3; ++l) {
            CHECK(post.layers[l].A == m.layers[l].A);
            CHECK(post.layers[l].U == m.layers[l].U);
            CHECK(post.layers[l].O == m.layers[l].O);
            if (l != 2) CHECK(post.layers[l].D == m.layers[l].D);
        }
        const MatrixXd delta = (post.layers[2].D - m.layers[2].D).cast<double>();
        const MatrixXd want = 4.0 * spec.a[0] * spec.b[0].transpose() + 1.5 * spec.a[1] * spec.b[1].transpose();
        CHECK((delta - want).cwiseAbs().maxCoeff() < 1e-5);
        const SvdResult r = full_svd_oracle(delta);
        CHECK(r.S(0) == doctest::Approx(4.0).epsilon(1e-5));
        CHECK(r.S(1) == doctest::Approx(1.5).epsilon(1e-5));
    }
    SUBCASE("validation") {
        PlantSpec spec = random_plant(5, m, 0, Site::attn_out, {2.0, 2.0});
        CHECK_THROWS_AS(plant_update(m, spec), UsageError);
        spec = random_plant(5, m, 0, Site::attn_out, {2.0, 1.0});
        spec.a[1] = spec.a[0];
        CHECK_THROWS_AS(plant_update(m, spec), UsageError);
        spec = random_plant(5, m, 0, Site::attn_out, {2.0});
        spec.b[0] = VectorXd::Ones(3);
        CHECK_THROWS_AS(plant_update(m, spec), ShapeError);
        spec = random_plant(5, m, 0, Site::attn_out, {-1.0});
        CHECK_THROWS_AS(plant_update(m, spec), UsageError);
    }
}

TEST_CASE("gd_single_sample") {
    wwtest::TestRng rng(6);
    SUBCASE("T = 1 closed form") {
        const MatrixXd M0 = wwtest::gaussian(rng, 5, 4);
        const VectorXd v = wwtest::gaussian(rng, 4, 1).col(0);
        const VectorXd z = wwtest::gaussian(rng, 5, 1).col(0);
        const MatrixXd M1 = gd_single_sample(M0, v, {z}, 0.1, 1);
        const MatrixXd want = -0.1 * (M0 * v - z) * v.transpose();
        CHECK(((M1 - M0) - want).cwiseAbs().maxCoeff() <= 1e-15);
    }
    SUBCASE("rank-1 update aligned with v") {
        for (int seed = 0; seed < 20; ++seed) {
            const MatrixXd M0 = wwtest::gaussian(rng, 12, 9);
            const VectorXd v = wwtest::gaussian(rng, 9, 1).col(0);
            std::vector<VectorXd> targets;
            for (int t = 0; t < 15; ++t) targets.push_back(wwtest::gaussian(rng, 12, 1).col(0));
            const double eta = 0.5 / v.squaredNorm();
            const MatrixXd d = gd_single_sample(M0, v, targets, eta, 15) - M0;
            const SvdResult r = full_svd_oracle(d);
            CHECK(r.S(0) > 0.0);
            CHECK(r.S(1) / r.S(0) <= 1e-9);
            CHECK(std::abs(r.V.col(0).dot(v.normalized())) >= 1.0 - 1e-9);
        }
    }
    SUBCASE("divergence names the step") {
        const MatrixXd M0 = MatrixXd::Ones(2, 2);
        const VectorXd v = VectorXd::Ones(2);
        CHECK_THROWS_WITH_AS(gd_single_sample(M0, v, {VectorXd::Zero(2)}, 1e6, 400), doctest::Contains("step"), NumericError);
    }
    SUBCASE("argument checks") {
        CHECK_THROWS_AS(gd_single_sample(MatrixXd::Ones(2, 2), VectorXd::Ones(2), {VectorXd::Zero(2)}, 0.1, 0), UsageError);
        CHECK_THROWS_AS(gd_single_sample(MatrixXd::Ones(2, 2), VectorXd::Ones(3), {VectorXd::Zero(2)}, 0.1, 1), ShapeError);
        CHECK_THROWS_AS(gd_single_sample(MatrixXd::Ones(2, 2), VectorXd::Ones(2), {VectorXd::Zero(2), VectorXd::Zero(2)}, 0.1, 3), UsageError);
    }
}

TEST_CASE("generic inputs") {
    const auto xs = gen_generic_inputs(9, 2000, 64);
    double mean_norm2 = 0.0;
    for (const auto& x : xs) mean_norm2 += x.squaredNorm();
    CHECK(mean_norm2 / 2000 == doctest::Approx(1.0).epsilon(0.02));
    CHECK(gen_generic_inputs(9, 3, 64, 1)[0] != xs[0]);
    CHECK(gen_generic_inputs(9, 3, 64)[2] == xs[2]);
}

TEST_CASE("counter rng is reproducible from coordinates") {
    CounterRng a(5, RngStream::inputs, 3);
    std::vector<uint64_t> first;
    for (int i = 0; i < 10; ++i) first.push_back(a.next_u64());
    CounterRng b(5, RngStream::inputs, 3);
    for (int i = 0; i < 10; ++i) CHECK(b.next_u64() == first[static_cast<size_t>(i)]);
    CounterRng c(5, RngStream::weights, 3);
    CHECK(c.next_u64() != first[0]);
    // below() is unbiased enough to hit every bucket
    CounterRng d(1, RngStream::sampling);
    std::vector<int> counts(7);
    for (int i = 0; i < 7000; ++i) ++counts[d.below(7)];
    for (int n : counts) CHECK(std::abs(n - 1000) < 150);
    double s = 0, s2 = 0;
    for (int i = 0; i < 20000; ++i) {
        const double x = d.normal();
        s += x;
        s2 += x * x;
    }
    CHECK(std::abs(s / 20000) < 0.03);
    CHECK(s2 / 20000 == doctest::Approx(1.0).epsilon(0.04));
}
