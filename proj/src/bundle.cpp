// SPDX-License-Identifier: Apache-2.0
#include "ww/bundle.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ww/parallel.hpp"
#include "ww/svd.hpp"

namespace ww {

using json = nlohmann::json;

std::string VectorBundle::checksum() const {
    Fnv1a h;
    h.update(base_id);
    h.update_pod(uint8_t{0});
    h.update(post_id);
    h.update_pod(uint8_t{0});
    h.update_pod(d_model);
    h.update_pod(n_layers);
    h.update_pod(static_cast<uint8_t>(subtract));
    for (const auto& v : vectors) {
        h.update_pod(v.layer);
        h.update_pod(static_cast<uint8_t>(v.site));
        h.update_pod(v.index);
        h.update(v.u.data(), v.u.size() * sizeof(float));
    }
    return h.hex();
}

const BehavioralVector* VectorBundle::find(const DirectionKey& key) const {
    for (const auto& v : vectors)
        if (v.key() == key) return &v;
    return nullptr;
}

void validate_bundle(const VectorBundle& bundle) {
    const auto& vs = bundle.vectors;
    for (size_t i = 0; i < vs.size(); ++i) {
        const auto& v = vs[i];
        const std::string name = v.key().render();
        if (v.u.size() != bundle.d_model)
            throw ShapeError(name + ": length " + std::to_string(v.u.size()) + " != d_model " + std::to_string(bundle.d_model));
        double norm2 = 0.0;
        for (float x : v.u) {
            if (!std::isfinite(x)) throw NumericError(name + ": non-finite entry");
            norm2 += double(x) * double(x);
        }
        if (std::abs(std::sqrt(norm2) - 1.0) > 1e-6) throw NumericError(name + ": not unit norm");
        if (!(v.sigma >= 0.0)) throw NumericError(name + ": negative or NaN sigma");
        if (i == 0) continue;
        const auto& prev = vs[i - 1];
        if (!(prev.key() < v.key())) throw FormatError(name + ": vectors not ordered by (layer, site, index)");
        if (prev.layer == v.layer && prev.site == v.site && v.sigma > prev.sigma)
            throw NumericError(name + ": sigma increases within site");
    }
    for (size_t i = 0; i < vs.size(); ++i) {
        for (size_t j = i + 1; j < vs.size() && vs[j].layer == vs[i].layer && vs[j].site == vs[i].site; ++j) {
            double dot = 0.0;
            for (size_t d = 0; d < vs[i].u.size(); ++d) dot += double(vs[i].u[d]) * double(vs[j].u[d]);
            if (std::abs(dot) > 1e-4)
                throw NumericError(vs[i].key().render() + " and " + vs[j].key().render() + " are not orthogonal");
        }
    }
}

VectorBundle extract_behavioral_vectors(const TensorMap& base, const TensorMap& post,
                                        const LayerNamingSpec& spec, const ExtractOptions& opts) {
    if (opts.k == 0) throw UsageError("k must be >= 1");
    uint32_t n_layers = spec.n_layers ? spec.n_layers : infer_n_layers(base, spec);
    if (n_layers == 0) throw ShapeError("no layers resolved by the naming spec");

    std::vector<uint32_t> layers;
    if (opts.layers) {
        layers = *opts.layers;
        for (uint32_t l : layers)
            if (l >= n_layers) throw UsageError("layer " + std::to_string(l) + " out of range (n_layers " + std::to_string(n_layers) + ")");
    } else {
        for (uint32_t l = 0; l < n_layers; ++l) layers.push_back(l);
    }
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    std::vector<Site> sites = opts.sites;
    std::sort(sites.begin(), sites.end());
    sites.erase(std::unique(sites.begin(), sites.end()), sites.end());

    struct Job {
        uint32_t layer;
        Site site;
    };
    std::vector<Job> jobs;
    for (uint32_t l : layers)
        for (Site s : sites) {
            if (s == Site::probe) throw UsageError("probe is not a weight site");
            jobs.push_back({l, s});
        }

    struct SiteResult {
        uint32_t d_model = 0;
        std::vector<BehavioralVector> vectors;
        SiteNote note;
    };
    std::vector<SiteResult> results(jobs.size());

    parallel_for(jobs.size(), opts.threads, [&](size_t j) {
        const auto [layer, site] = jobs[j];
        const LayerPair pair = load_pair(base, post, spec, layer, site);
        const Eigen::MatrixXf m32 = opts.subtract ? weight_delta(pair) : pair.post;
        TruncatedSvdOptions so;
        so.k = opts.k;
        so.oversample = opts.oversample;
        so.power_iters = opts.power_iters;
        so.seed = opts.seed;
        so.substream = uint64_t{layer} * 4 + static_cast<uint64_t>(site);
        const TruncatedSvd svd = truncated_svd(m32.cast<double>(), so);

        SiteResult& r = results[j];
        r.d_model = static_cast<uint32_t>(pair.post.rows());
        for (Eigen::Index i = 0; i < svd.U.cols(); ++i) {
            BehavioralVector v;
            v.layer = layer;
            v.site = site;
            v.index = static_cast<uint32_t>(i);
            v.sigma = svd.S(i);
            v.u.resize(static_cast<size_t>(svd.U.rows()));
            for (Eigen::Index d = 0; d < svd.U.rows(); ++d) v.u[static_cast<size_t>(d)] = static_cast<float>(svd.U(d, i));
            r.vectors.push_back(std::move(v));
        }
        r.note = {layer, site, opts.k, static_cast<uint32_t>(svd.U.cols()), svd.converged};
    });

    VectorBundle bundle;
    bundle.base_id = opts.base_id;
    bundle.post_id = opts.post_id;
    bundle.n_layers = n_layers;
    bundle.k = opts.k;
    bundle.subtract = opts.subtract;
    bundle.seed = opts.seed;
    bundle.oversample = opts.oversample;
    bundle.power_iters = opts.power_iters;
    for (auto& r : results) {
        if (bundle.d_model == 0) bundle.d_model = r.d_model;
        if (r.d_model != bundle.d_model)
            throw ShapeError("residual width differs across sites: " + std::to_string(bundle.d_model) + " vs " + std::to_string(r.d_model));
        for (auto& v : r.vectors) bundle.vectors.push_back(std::move(v));
        if (r.note.returned < r.note.requested || !r.note.converged) bundle.site_notes.push_back(r.note);
    }
    validate_bundle(bundle);
    return bundle;
}

std::string serialize_bundle(const VectorBundle& b) {
    validate_bundle(b);
    json j;
    j["format_version"] = b.format_version;
    j["base_id"] = b.base_id;
    j["post_id"] = b.post_id;
    j["d_model"] = b.d_model;
    j["n_layers"] = b.n_layers;
    j["k"] = b.k;
    j["subtract"] = b.subtract;
    j["provenance"] = b.subtract ? "diff" : "raw";
    j["checksum"] = b.checksum();
    j["svd"] = {{"seed", b.seed}, {"oversample", b.oversample}, {"power_iters", b.power_iters}};
    json notes = json::array();
    for (const auto& n : b.site_notes)
        notes.push_back({{"layer", n.layer}, {"site", to_string(n.site)}, {"requested", n.requested},
                         {"returned", n.returned}, {"converged", n.converged}});
    j["site_notes"] = std::move(notes);
    json vecs = json::array();
    for (const auto& v : b.vectors)
        vecs.push_back({{"layer", v.layer}, {"site", to_string(v.site)}, {"index", v.index}, {"sigma", v.sigma},
                        {"u_b64", base64_encode(v.u.data(), v.u.size() * sizeof(float))}});
    j["vectors"] = std::move(vecs);
    return j.dump(1) + "\n";
}

VectorBundle parse_bundle(const std::string& text) {
    VectorBundle b;
    try {
        const json j = json::parse(text);
        b.format_version = j.at("format_version").get<int>();
        if (b.format_version != 1) throw FormatError("unsupported bundle format_version " + std::to_string(b.format_version));
        b.base_id = j.at("base_id").get<std::string>();
        b.post_id = j.at("post_id").get<std::string>();
        b.d_model = j.at("d_model").get<uint32_t>();
        b.n_layers = j.value("n_layers", 0u);
        b.k = j.at("k").get<uint32_t>();
        b.subtract = j.at("subtract").get<bool>();
        if (j.contains("svd")) {
            const auto& s = j.at("svd");
            b.seed = s.value("seed", uint64_t{0});
            b.oversample = s.value("oversample", 8u);
            b.power_iters = s.value("power_iters", 4u);
        }
        for (const auto& n : j.value("site_notes", json::array()))
            b.site_notes.push_back({n.at("layer").get<uint32_t>(), site_from_string(n.at("site").get<std::string>()),
                                    n.at("requested").get<uint32_t>(), n.at("returned").get<uint32_t>(),
                                    n.value("converged", true)});
        for (const auto& e : j.at("vectors")) {
            BehavioralVector v;
            v.layer = e.at("layer").get<uint32_t>();
            v.site = site_from_string(e.at("site").get<std::string>());
            v.index = e.at("index").get<uint32_t>();
            v.sigma = e.at("sigma").get<double>();
            const std::string raw = base64_decode(e.at("u_b64").get<std::string>());
            if (raw.size() % sizeof(float) != 0) throw FormatError("u_b64 length not a multiple of 4");
            v.u.resize(raw.size() / sizeof(float));
            std::memcpy(v.u.data(), raw.data(), raw.size());
            b.vectors.push_back(std::move(v));
        }
        if (j.contains("checksum") && j.at("checksum").get<std::string>() != b.checksum())
            throw FormatError("bundle checksum mismatch (file edited or corrupt)");
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed bundle: ") + e.what());
    }
    validate_bundle(b);
    return b;
}

void write_bundle(const VectorBundle& bundle, const std::string& path) {
    const std::string text = serialize_bundle(bundle);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write bundle " + path);
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

VectorBundle read_bundle(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open bundle " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_bundle(ss.str());
}

} // namespace ww
