// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>

#include "cli_util.hpp"
#include "ww/baselines.hpp"
#include "ww/bundle.hpp"
#include "ww/checkpoint.hpp"
#include "ww/rng.hpp"
#include "ww/synth.hpp"

namespace wwcli {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ww;

namespace {

std::vector<ActivationTrace> load_all(const std::vector<std::string>& paths) {
    std::vector<ActivationTrace> out;
    for (const auto& p : paths) {
        out.push_back(read_trace(p));
        validate_trace(out.back());
    }
    return out;
}

json vec_json(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd vec_from_json(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

} // namespace

// ---------------------------------------------------------------- baseline

void add_baseline(CLI::App& app) {
    auto* group = app.add_subcommand("baseline", "Comparison methods");
    group->require_subcommand(1);

    {
        struct Opts {
            std::vector<std::string> base, post, eval_base, eval_post;
            std::optional<uint32_t> layer;
            std::optional<uint64_t> position;
            double percentile = 98.0, epsilon = 0.01;
            std::string out;
        };
        auto o = std::make_shared<Opts>();
        auto* cmd = group->add_subcommand("act-diff", "Activation-difference norm threshold and flags");
        cmd->add_option("--base", o->base, "Base-model traces (calibration)")->required();
        cmd->add_option("--post", o->post, "Post-model traces, paired with --base")->required();
        cmd->add_option("--eval-base", o->eval_base, "Base-model traces to score");
        cmd->add_option("--eval-post", o->eval_post, "Post-model traces to score, paired with --eval-base");
        cmd->add_option("--layer", o->layer, "Layer (default: n_layers / 2)");
        cmd->add_option("--position", o->position, "Token position (default: last prompt token)");
        cmd->add_option("--percentile", o->percentile, "Threshold percentile")->capture_default_str();
        cmd->add_option("--epsilon", o->epsilon, "Threshold slack")->capture_default_str();
        cmd->add_option("-o,--out", o->out, "Write the result JSON here (default: stdout)");
        cmd->callback([o] {
            if (o->base.size() != o->post.size()) throw UsageError("--base and --post need the same number of traces");
            if (o->eval_base.size() != o->eval_post.size()) throw UsageError("--eval-base and --eval-post need the same number of traces");
            ActDiffConfig cfg;
            cfg.layer = o->layer;
            cfg.token_position = o->position;
            cfg.percentile = o->percentile;
            cfg.epsilon = o->epsilon;
            const auto bt = load_all(o->base), pt = load_all(o->post);
            const double thr = act_diff_threshold(bt, pt, cfg);
            auto score = [&](const std::vector<ActivationTrace>& b, const std::vector<ActivationTrace>& p,
                             const std::vector<std::string>& names) {
                json rows = json::array();
                size_t flagged = 0;
                for (size_t i = 0; i < b.size(); ++i) {
                    const bool f = act_diff_flag(b[i], p[i], cfg, thr);
                    flagged += f;
                    rows.push_back({{"trace", names[i]}, {"norm", act_diff_norm(b[i], p[i], cfg)}, {"flagged", f}});
                }
                return json{{"pairs", rows}, {"flag_rate", b.empty() ? 0.0 : double(flagged) / double(b.size())}};
            };
            json out = {{"config", {{"layer", o->layer ? json(*o->layer) : json(nullptr)},
                                    {"position", o->position ? json(*o->position) : json(nullptr)},
                                    {"percentile", o->percentile},
                                    {"epsilon", o->epsilon}}},
                        {"threshold", thr},
                        {"calibration", score(bt, pt, o->post)}};
            if (!o->eval_base.empty()) out["evaluation"] = score(load_all(o->eval_base), load_all(o->eval_post), o->eval_post);
            if (o->out.empty()) std::printf("%s\n", out.dump(2).c_str());
            else write_json(o->out, out);
        });
    }

    {
        struct Opts {
            std::vector<std::string> traces;
            std::string manifest, csv;
            std::optional<uint32_t> layer;
            size_t components = 2;
            bool all_tokens = false;
        };
        auto o = std::make_shared<Opts>();
        auto* cmd = group->add_subcommand("pca", "PCA projection of activations (CSV)");
        cmd->add_option("traces", o->traces, "Trace files");
        cmd->add_option("--manifest", o->manifest, "Labeled trace manifest");
        cmd->add_option("--layer", o->layer, "Layer (default: n_layers / 2)");
        cmd->add_option("--components", o->components, "Principal components")->capture_default_str();
        cmd->add_flag("--all-tokens", o->all_tokens, "Use every token instead of the last prompt token");
        cmd->add_option("--csv", o->csv, "CSV output")->required();
        cmd->callback([o] {
            const auto entries = gather_traces(o->traces, o->manifest);
            struct Row {
                size_t entry;
                size_t token;
                std::vector<double> x;
            };
            std::vector<Row> rows;
            uint32_t d = 0;
            for (size_t e = 0; e < entries.size(); ++e) {
                const ActivationTrace t = read_trace(entries[e].path);
                validate_trace(t);
                const uint32_t layer = o->layer.value_or(t.header.n_layers / 2);
                if (layer >= t.header.n_layers) throw ShapeError("layer " + std::to_string(layer) + " out of range in " + entries[e].path);
                if (d && d != t.header.d_model) throw ShapeError("d_model differs across traces");
                d = t.header.d_model;
                if (t.tokens.empty()) continue;
                std::vector<size_t> picks;
                if (o->all_tokens) {
                    for (size_t i = 0; i < t.tokens.size(); ++i) picks.push_back(i);
                } else {
                    const uint64_t pb = t.header.prompt_boundary.value_or(compute_prompt_boundary(t.tokens));
                    picks.push_back(pb > 0 ? pb - 1 : 0);
                }
                for (size_t i : picks) {
                    const auto a = t.tokens[i].layer(layer);
                    rows.push_back({e, i, std::vector<double>(a.begin(), a.end())});
                }
            }
            if (rows.empty()) throw UsageError("no tokens to project");
            Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), d);
            for (size_t r = 0; r < rows.size(); ++r)
                for (uint32_t j = 0; j < d; ++j) X(static_cast<Eigen::Index>(r), j) = rows[r].x[j];
            const PcaResult p = pca_fit_project(X, o->components);
            std::ofstream out(o->csv);
            if (!out) throw IoError("cannot write " + o->csv);
            out << "trace,label,token";
            for (size_t c = 0; c < o->components; ++c) out << ",pc" << (c + 1);
            out << "\n";
            out.precision(9);
            for (size_t r = 0; r < rows.size(); ++r) {
                out << entries[rows[r].entry].path << "," << entries[rows[r].entry].label << "," << rows[r].token;
                for (size_t c = 0; c < o->components; ++c) out << "," << p.projections(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
                out << "\n";
            }
            std::printf("%zu rows, explained variance ratio:", rows.size());
            for (Eigen::Index c = 0; c < p.explained_ratio.size(); ++c) std::printf(" %.4f", p.explained_ratio(c));
            std::printf("\n");
        });
    }

    {
        struct Opts {
            std::string pos, neg, out;
            uint32_t layer = 0;
            std::optional<uint64_t> position;
        };
        auto o = std::make_shared<Opts>();
        auto* cmd = group->add_subcommand("probe", "Contrastive mean-difference probe as a one-vector bundle");
        cmd->add_option("--pos", o->pos, "Positive trace")->required();
        cmd->add_option("--neg", o->neg, "Negative trace")->required();
        cmd->add_option("--layer", o->layer, "Layer")->required();
        cmd->add_option("--position", o->position, "Token position (default: every token)");
        cmd->add_option("-o,--out", o->out, "Output bundle (.wwvb)")->required();
        cmd->callback([o] {
            const ActivationTrace pos = read_trace(o->pos), neg = read_trace(o->neg);
            const auto dir = probe_direction(pos, neg, o->layer, o->position);
            const VectorBundle b = probe_bundle(dir, o->layer, pos.header.n_layers, "probe:" + stem(o->pos) + "-" + stem(o->neg));
            write_bundle(b, o->out);
            std::printf("%s: probe direction at layer %u (d_model %u)\n", o->out.c_str(), o->layer, b.d_model);
        });
    }

    {
        struct Opts {
            std::string a, b;
            size_t samplings = 1000;
            uint64_t seed = 0;
        };
        auto o = std::make_shared<Opts>();
        auto* cmd = group->add_subcommand("kl", "Median first-token KL between two distribution sets");
        cmd->add_option("--a", o->a, "Distribution set A (JSON)")->required();
        cmd->add_option("--b", o->b, "Distribution set B (JSON)")->required();
        cmd->add_option("--samplings", o->samplings, "Random pairs")->capture_default_str();
        cmd->add_option("--seed", o->seed, "Pair sampling seed")->capture_default_str();
        cmd->callback([o] {
            const auto a = read_dists(o->a), b = read_dists(o->b);
            const double m = median_kl(a, b, o->samplings, o->seed);
            std::printf("%s\n", json({{"median_kl", std::isinf(m) ? json("inf") : json(m)},
                                      {"samplings", o->samplings},
                                      {"seed", o->seed}}).dump().c_str());
        });
    }
}

// ---------------------------------------------------------------- synth

void add_synth(CLI::App& app) {
    auto* group = app.add_subcommand("synth", "Synthetic fixtures");
    group->require_subcommand(1);

    {
        struct Opts {
            uint64_t seed = 0;
            uint32_t layers = 8, d_model = 64, d_ff = 256, plant_layer = 2;
            std::string site = "attn_out", scales = "1", out_dir;
        };
        auto o = std::make_shared<Opts>();
        auto* cmd = group->add_subcommand("make-pair", "Toy base model plus a planted low-rank update");
        cmd->add_option("--seed", o->seed, "Seed")->capture_default_str();
        cmd->add_option("--layers", o->layers, "Layers")->capture_default_str();
        cmd->add_option("--d-model", o->d_model, "Residual width")->capture_default_str();
        cmd->add_option("--d-ff", o->d_ff, "Hidden width")->capture_default_str();
        cmd->add_option("--plant-layer", o->plant_layer, "Layer of the planted update")->capture_default_str();
        cmd->add_option("--site", o->site, "attn_out | mlp_down")->capture_default_str();
        cmd->add_option("--scales", o->scales, "Comma-separated planted singular values (empty: no plant)")->capture_default_str();
        cmd->add_option("--out-dir", o->out_dir, "Output directory")->required();
        cmd->callback([o] {
            const ToyModel base = make_toy_model(o->seed, o->layers, o->d_model, o->d_ff);
            const auto [post, truth] =
                plant_update(base, random_plant(o->seed, base, o->plant_layer, site_from_string(o->site), parse_double_list(o->scales)));
            ensure_dir(o->out_dir);
            const fs::path dir(o->out_dir);
            write_checkpoint(base.to_checkpoint(), (dir / "base.safetensors").string());
            write_checkpoint(post.to_checkpoint(), (dir / "post.safetensors").string());
            json a = json::array();
            for (const auto& v : truth.a) a.push_back(vec_json(v));
            write_json((dir / "truth.json").string(), {{"seed", o->seed},
                                                       {"layer", truth.layer},
                                                       {"site", std::string(to_string(site_from_string(o->site)))},
                                                       {"scales", truth.scales},
                                                       {"a", a}});
            std::printf("%s: base.safetensors, post.safetensors, truth.json (rank %zu at layer %u)\n", o->out_dir.c_str(),
                        truth.scales.size(), truth.layer);
        });
    }

    {
        struct Opts {
            std::string model, out_dir, prefix = "trace", truth, label, manifest;
            uint64_t seed = 0, substream = 0;
            size_t count = 1, tokens = 1;
            std::optional<size_t> prompt_tokens;
            std::optional<uint32_t> anomaly_layer;
            size_t anomaly_index = 0;
            double magnitude = 5.0;
            bool f16 = false, append = false;
        };
        auto o = std::make_shared<Opts>();
        auto* cmd = group->add_subcommand("gen-traces", "Activation traces from a toy checkpoint");
        cmd->add_option("--model", o->model, "Toy checkpoint")->required();
        cmd->add_option("--out-dir", o->out_dir, "Output directory")->required();
        cmd->add_option("--count", o->count, "Number of traces")->capture_default_str();
        cmd->add_option("--tokens", o->tokens, "Tokens per trace")->capture_default_str();
        cmd->add_option("--prompt-tokens", o->prompt_tokens, "User tokens per trace (default: all); the rest are assistant");
        cmd->add_option("--seed", o->seed, "Input seed")->capture_default_str();
        cmd->add_option("--substream", o->substream, "Input substream (use distinct values for disjoint sets)")->capture_default_str();
        cmd->add_option("--prefix", o->prefix, "File name prefix")->capture_default_str();
        cmd->add_option("--truth", o->truth, "truth.json from make-pair; injects an anomaly along a planted direction");
        cmd->add_option("--anomaly-index", o->anomaly_index, "Planted direction index")->capture_default_str();
        cmd->add_option("--anomaly-layer", o->anomaly_layer, "Injection layer (default: the planted layer)");
        cmd->add_option("--magnitude", o->magnitude, "Anomaly magnitude")->capture_default_str();
        cmd->add_option("--label", o->label, "Manifest label (default: anomalous with --truth, else generic)");
        cmd->add_option("--manifest", o->manifest, "Manifest path (default: <out-dir>/manifest.json)");
        cmd->add_flag("--append", o->append, "Append to an existing manifest");
        cmd->add_flag("--f16", o->f16, "Store activations as f16");
        cmd->callback([o] {
            const ToyModel model = ToyModel::from_checkpoint(load_checkpoint(o->model));
            std::optional<Anomaly> anomaly;
            if (!o->truth.empty()) {
                json t;
                try {
                    t = json::parse(read_text(o->truth));
                } catch (const json::exception& e) {
                    throw FormatError("truth " + o->truth + ": " + e.what());
                }
                const auto& a = t.at("a");
                if (o->anomaly_index >= a.size()) throw UsageError("--anomaly-index out of range");
                anomaly = Anomaly{vec_from_json(a[o->anomaly_index]), o->magnitude, o->anomaly_layer.value_or(t.at("layer").get<uint32_t>())};
            }
            const std::string label = !o->label.empty() ? o->label : (anomaly ? "anomalous" : "generic");
            const size_t prompt = std::min(o->prompt_tokens.value_or(o->tokens), o->tokens);
            const auto xs = gen_generic_inputs(o->seed, o->count * o->tokens, model.d_model, o->substream);
            ensure_dir(o->out_dir);
            const std::string manifest = o->manifest.empty() ? (fs::path(o->out_dir) / "manifest.json").string() : o->manifest;
            std::vector<TraceEntry> entries;
            if (o->append && fs::exists(manifest)) entries = read_manifest(manifest);
            for (size_t c = 0; c < o->count; ++c) {
                std::vector<TokenInput> in;
                for (size_t k = 0; k < o->tokens; ++k) in.push_back({xs[c * o->tokens + k], k < prompt ? Role::user : Role::assistant});
                ActivationTrace t = gen_activation_stream(model, in, anomaly, stem(o->model));
                if (o->f16) t.header.dtype = TraceDType::f16;
                char name[64];
                std::snprintf(name, sizeof name, "%s_%05zu.wwtr", o->prefix.c_str(), c);
                const std::string path = (fs::path(o->out_dir) / name).string();
                write_trace(t, path);
                entries.push_back({path, label});
            }
            write_manifest(entries, manifest);
            std::printf("%zu %s traces in %s; manifest %s\n", o->count, label.c_str(), o->out_dir.c_str(), manifest.c_str());
        });
    }

    {
        struct Opts {
            uint64_t seed = 0;
            uint32_t rows = 16, cols = 12;
            size_t steps = 20;
            double eta_scale = 0.5;
        };
        auto o = std::make_shared<Opts>();
        auto* cmd = group->add_subcommand("gd-rank1", "Gradient descent on one fixed input; reports the rank of the update");
        cmd->add_option("--seed", o->seed, "Seed")->capture_default_str();
        cmd->add_option("--rows", o->rows, "Output dimension")->capture_default_str();
        cmd->add_option("--cols", o->cols, "Input dimension")->capture_default_str();
        cmd->add_option("--steps", o->steps, "Gradient steps")->capture_default_str();
        cmd->add_option("--eta-scale", o->eta_scale, "Step size times |v|^2")->capture_default_str();
        cmd->callback([o] {
            CounterRng rng(o->seed, RngStream::inputs, 0x6d);
            auto gaussian = [&](Eigen::Index m, Eigen::Index n) {
                Eigen::MatrixXd g(m, n);
                for (Eigen::Index i = 0; i < m; ++i)
                    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = rng.normal();
                return g;
            };
            const Eigen::MatrixXd M0 = gaussian(o->rows, o->cols);
            const Eigen::VectorXd v = gaussian(o->cols, 1).col(0);
            std::vector<Eigen::VectorXd> targets;
            for (size_t t = 0; t < o->steps; ++t) targets.push_back(gaussian(o->rows, 1).col(0));
            const double eta = o->eta_scale / v.squaredNorm();
            const Eigen::MatrixXd dM = gd_single_sample(M0, v, targets, eta, o->steps) - M0;
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(dM, Eigen::ComputeThinV);
            const auto& S = svd.singularValues();
            const json out = {{"seed", o->seed},
                              {"steps", o->steps},
                              {"eta", eta},
                              {"sigma1", S(0)},
                              {"sigma2_over_sigma1", S.size() > 1 && S(0) > 0 ? S(1) / S(0) : 0.0},
                              {"alignment", std::abs(svd.matrixV().col(0).dot(v.normalized()))}};
            std::printf("%s\n", out.dump().c_str());
        });
    }
}

// ---------------------------------------------------------------- fpr-bound

void add_fpr_bound(CLI::App& app) {
    struct Opts {
        uint64_t t = 1, n = 1000;
    };
    auto o = std::make_shared<Opts>();
    auto* cmd = app.add_subcommand("fpr-bound", "False-positive bound 1 - (1 - 1/n)^(2t)");
    cmd->add_option("-t,--t", o->t, "Monitored directions")->required();
    cmd->add_option("-n,--n", o->n, "Calibration samples plus one")->required();
    cmd->callback([o] { std::printf("%.10g\n", fpr_bound(o->t, o->n)); });
}

} // namespace wwcli
