// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "ww/bundle.hpp"
#include "ww/svd.hpp"
#include "ww/synth.hpp"

using namespace ww;
using Eigen::MatrixXd;

namespace {

MatrixXd site_span(const VectorBundle& b, uint32_t layer, Site site, size_t r) {
    MatrixXd out(b.d_model, static_cast<Eigen::Index>(r));
    size_t c = 0;
    for (const auto& v : b.vectors) {
        if (v.layer != layer || v.site != site || v.index >= r) continue;
        for (uint32_t i = 0; i < b.d_model; ++i) out(i, static_cast<Eigen::Index>(v.index)) = v.u[i];
        ++c;
    }
    REQUIRE(c == r);
    // re-orthonormalize the f32-rounded vectors before measuring angles
    Eigen::HouseholderQR<MatrixXd> qr(out);
    return qr.householderQ() * MatrixXd::Identity(out.rows(), out.cols());
}

MatrixXd truth_span(const PlantTruth& t) {
    MatrixXd out(t.a.front().size(), static_cast<Eigen::Index>(t.a.size()));
    for (size_t j = 0; j < t.a.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = t.a[j];
    return out;
}

size_t count_site(const VectorBundle& b, uint32_t layer, Site site) {
    size_t n = 0;
    for (const auto& v : b.vectors) n += v.layer == layer && v.site == site;
    return n;
}

} // namespace

TEST_CASE("planted rank-1 update in a 2-layer toy model") {
    const ToyModel base = make_toy_model(1, 2, 16, 32);
    const auto [post, truth] = plant_update(base, random_plant(1, base, 1, Site::mlp_down, {10.0}));
    ExtractOptions opts;
    opts.k = 4;
    const VectorBundle b = extract_behavioral_vectors(base.to_checkpoint(), post.to_checkpoint(), naming_preset("toy"), opts);
    CHECK(b.d_model == 16);
    CHECK(b.n_layers == 2);
    REQUIRE(count_site(b, 1, Site::mlp_down) == 1);
    const BehavioralVector* top = b.find({1, Site::mlp_down, 0});
    REQUIRE(top != nullptr);
    double c = 0.0;
    for (int i = 0; i < 16; ++i) c += top->u[static_cast<size_t>(i)] * truth.a[0](i);
    CHECK(std::abs(c) >= 0.99);
    CHECK(top->sigma >= 9.9);
    CHECK(top->sigma <= 10.1);
    CHECK(count_site(b, 0, Site::attn_out) == 0);
    CHECK(count_site(b, 0, Site::mlp_down) == 0);
    CHECK(count_site(b, 1, Site::attn_out) == 0);
    CHECK(b.site_notes.size() == 4);
    for (const auto& n : b.site_notes) {
        CHECK(n.requested == 4);
        CHECK(n.returned == ((n.layer == 1 && n.site == Site::mlp_down) ? 1u : 0u));
    }
}

TEST_CASE("identical checkpoints give an empty bundle") {
    const ToyModel m = make_toy_model(2, 3, 8, 16);
    const VectorBundle b = extract_behavioral_vectors(m.to_checkpoint(), m.to_checkpoint(), naming_preset("toy"), {});
    CHECK(b.vectors.empty());
    CHECK(b.site_notes.size() == 6);
    CHECK(b.provenance() == Provenance::diff);
}

TEST_CASE("subtract=false equals the truncated SVD of raw post weights") {
    const ToyModel base = make_toy_model(3, 2, 12, 20);
    const ToyModel post = make_toy_model(4, 2, 12, 20);
    ExtractOptions opts;
    opts.k = 3;
    opts.subtract = false;
    opts.seed = 8;
    const VectorBundle b = extract_behavioral_vectors(base.to_checkpoint(), post.to_checkpoint(), naming_preset("toy"), opts);
    CHECK(b.provenance() == Provenance::raw);
    REQUIRE(b.vectors.size() == 12);
    for (uint32_t l = 0; l < 2; ++l) {
        for (Site s : {Site::attn_out, Site::mlp_down}) {
            TruncatedSvdOptions so;
            so.k = 3;
            so.seed = 8;
            so.substream = uint64_t{l} * 4 + static_cast<uint64_t>(s);
            const TruncatedSvd t = truncated_svd(post.site_matrix(l, s).cast<double>(), so);
            for (uint32_t i = 0; i < 3; ++i) {
                const BehavioralVector* v = b.find({l, s, i});
                REQUIRE(v != nullptr);
                CHECK(v->sigma == t.S(i));
                for (int d = 0; d < 12; ++d) CHECK(v->u[static_cast<size_t>(d)] == static_cast<float>(t.U(d, i)));
            }
        }
    }
}

TEST_CASE("planted rank-3 recovery and determinism across thread counts") {
    const ToyModel base = make_toy_model(5, 3, 32, 64);
    const auto [post, truth] = plant_update(base, random_plant(5, base, 2, Site::attn_out, {9.0, 6.0, 3.0}));
    ExtractOptions opts;
    opts.k = 5;
    opts.threads = 1;
    const VectorBundle one = extract_behavioral_vectors(base.to_checkpoint(), post.to_checkpoint(), naming_preset("toy"), opts);
    opts.threads = 4;
    const VectorBundle four = extract_behavioral_vectors(base.to_checkpoint(), post.to_checkpoint(), naming_preset("toy"), opts);
    CHECK(one == four);
    CHECK(serialize_bundle(one) == serialize_bundle(four));
    CHECK(max_principal_angle(truth_span(truth), site_span(one, 2, Site::attn_out, 3)) <= 1e-3);
}

TEST_CASE("layer and site selection") {
    const ToyModel base = make_toy_model(6, 4, 8, 16);
    const auto [post, truth] = plant_update(base, random_plant(6, base, 2, Site::attn_out, {3.0}));
    ExtractOptions opts;
    opts.k = 2;
    opts.layers = std::vector<uint32_t>{2};
    opts.sites = {Site::attn_out};
    const VectorBundle b = extract_behavioral_vectors(base.to_checkpoint(), post.to_checkpoint(), naming_preset("toy"), opts);
    REQUIRE(b.vectors.size() == 1);
    CHECK(b.vectors[0].key() == DirectionKey{2, Site::attn_out, 0});
    opts.layers = std::vector<uint32_t>{9};
    CHECK_THROWS_AS(extract_behavioral_vectors(base.to_checkpoint(), post.to_checkpoint(), naming_preset("toy"), opts), UsageError);
    opts.layers.reset();
    opts.k = 0;
    CHECK_THROWS_AS(extract_behavioral_vectors(base.to_checkpoint(), post.to_checkpoint(), naming_preset("toy"), opts), UsageError);
}

TEST_CASE("bundle file round-trips byte-exact") {
    const auto dir = wwtest::scratch_dir("bundle");
    const ToyModel base = make_toy_model(7, 2, 16, 24);
    const ToyModel post = make_toy_model(8, 2, 16, 24);
    ExtractOptions opts;
    opts.k = 4;
    opts.base_id = "base";
    opts.post_id = "post";
    const VectorBundle b = extract_behavioral_vectors(base.to_checkpoint(), post.to_checkpoint(), naming_preset("toy"), opts);
    const auto p1 = (dir / "a.wwvb").string();
    const auto p2 = (dir / "b.wwvb").string();
    write_bundle(b, p1);
    const VectorBundle back = read_bundle(p1);
    CHECK(back == b);
    CHECK(back.checksum() == b.checksum());
    write_bundle(back, p2);
    CHECK(wwtest::slurp(p1) == wwtest::slurp(p2));

    SUBCASE("edited payload fails the checksum") {
        std::string text = serialize_bundle(b);
        const auto pos = text.find("\"post\"");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 6, "\"tsop\"");
        CHECK_THROWS_AS(parse_bundle(text), FormatError);
    }
    SUBCASE("malformed json") {
        CHECK_THROWS_AS(parse_bundle("{"), FormatError);
    }
}

TEST_CASE("validate_bundle") {
    VectorBundle b;
    b.d_model = 2;
    b.vectors.push_back({0, Site::attn_out, 0, 2.0, {1.0f, 0.0f}});
    b.vectors.push_back({0, Site::attn_out, 1, 1.0, {0.0f, 1.0f}});
    CHECK_NOTHROW(validate_bundle(b));
    SUBCASE("non-unit") {
        b.vectors[1].u = {0.0f, 1.01f};
        CHECK_THROWS_AS(validate_bundle(b), NumericError);
    }
    SUBCASE("increasing sigma") {
        b.vectors[1].sigma = 3.0;
        CHECK_THROWS_AS(validate_bundle(b), NumericError);
    }
    SUBCASE("not orthogonal") {
        b.vectors[1].u = {0.6f, 0.8f};
        CHECK_THROWS_AS(validate_bundle(b), NumericError);
    }
    SUBCASE("misordered") {
        std::swap(b.vectors[0], b.vectors[1]);
        CHECK_THROWS(validate_bundle(b));
    }
    SUBCASE("wrong length") {
        b.vectors[0].u = {1.0f};
        CHECK_THROWS_AS(validate_bundle(b), ShapeError);
    }
}

TEST_CASE("direction keys render in short form") {
    CHECK(DirectionKey{4, Site::attn_out, 11}.render() == "O4_u11");
    CHECK(DirectionKey{5, Site::mlp_down, 12}.render() == "D5_u12");
    CHECK(DirectionKey{3, Site::probe, 0}.render() == "P3_u0");
}
