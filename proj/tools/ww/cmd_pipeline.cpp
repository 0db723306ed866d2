// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>

#include "cli_util.hpp"
#include "ww/bundle.hpp"
#include "ww/checkpoint.hpp"
#include "ww/monitor.hpp"
#include "ww/parallel.hpp"
#include "ww/serve.hpp"
#include "ww/steer.hpp"

namespace wwcli {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ww;

namespace {

std::set<uint32_t> exclusions_from(const std::string& text, bool none, const std::optional<std::set<uint32_t>>& fallback) {
    if (none) return {};
    if (!text.empty()) {
        const auto v = parse_u32_list(text);
        return {v.begin(), v.end()};
    }
    return fallback.value_or(std::set<uint32_t>{});
}

ActivationTrace load_trace_checked(const std::string& path) {
    ActivationTrace t = read_trace(path);
    validate_trace(t);
    return t;
}

std::string file_label(const std::string& path) {
    return fs::path(path).filename().string();
}

} // namespace

// ---------------------------------------------------------------- extract

void add_extract(CLI::App& app) {
    struct Opts {
        std::string base, post, out, preset = "llama", attn_pattern, mlp_pattern, layers, sites = "attn_out,mlp_down";
        bool transposed = false, no_subtract = false;
        uint32_t k = 20, oversample = 8, power_iters = 4, n_layers = 0;
        uint64_t seed = 0;
        unsigned threads = 0;
    };
    auto o = std::make_shared<Opts>();
    auto* cmd = app.add_subcommand("extract", "Extract behavioral vectors from a base/post checkpoint pair");
    cmd->add_option("--base", o->base, "Base checkpoint")->required();
    cmd->add_option("--post", o->post, "Fine-tuned checkpoint")->required();
    cmd->add_option("-o,--out", o->out, "Output bundle (.wwvb)")->required();
    cmd->add_option("--preset", o->preset, "Tensor naming preset (" + [] {
        std::string s;
        for (const auto& n : naming_preset_names()) s += (s.empty() ? "" : ", ") + n;
        return s;
    }() + ")")->capture_default_str();
    cmd->add_option("--attn-pattern", o->attn_pattern, "Custom attn_out tensor pattern ({layer}, *)");
    cmd->add_option("--mlp-pattern", o->mlp_pattern, "Custom mlp_down tensor pattern ({layer}, *)");
    cmd->add_flag("--transposed", o->transposed, "Custom patterns store (d_in x d_out)");
    cmd->add_option("--n-layers", o->n_layers, "Layer count (0: infer)")->capture_default_str();
    cmd->add_option("-k,--k", o->k, "Vectors per site")->capture_default_str();
    cmd->add_flag("--no-subtract", o->no_subtract, "Decompose the post weights directly");
    cmd->add_option("--layers", o->layers, "Comma-separated layer subset");
    cmd->add_option("--sites", o->sites, "Comma-separated sites")->capture_default_str();
    cmd->add_option("--oversample", o->oversample, "Randomized SVD oversampling")->capture_default_str();
    cmd->add_option("--power-iters", o->power_iters, "Randomized SVD power iterations")->capture_default_str();
    cmd->add_option("--seed", o->seed, "Sketch seed")->capture_default_str();
    cmd->add_option("--threads", o->threads, "Worker threads (0: WW_THREADS or all cores)");
    cmd->callback([o] {
        LayerNamingSpec spec;
        if (!o->attn_pattern.empty() || !o->mlp_pattern.empty()) {
            if (o->attn_pattern.empty() || o->mlp_pattern.empty())
                throw UsageError("--attn-pattern and --mlp-pattern must be given together");
            spec.attn_out_pattern = o->attn_pattern;
            spec.mlp_down_pattern = o->mlp_pattern;
            spec.transposed = o->transposed;
        } else {
            spec = naming_preset(o->preset);
        }
        spec.n_layers = o->n_layers;
        ExtractOptions eo;
        eo.k = o->k;
        eo.subtract = !o->no_subtract;
        if (!o->layers.empty()) eo.layers = parse_u32_list(o->layers);
        eo.sites.clear();
        std::stringstream ss(o->sites);
        for (std::string item; std::getline(ss, item, ',');)
            if (!item.empty()) eo.sites.push_back(site_from_string(item));
        if (eo.sites.empty()) throw UsageError("--sites is empty");
        eo.oversample = o->oversample;
        eo.power_iters = o->power_iters;
        eo.seed = o->seed;
        eo.threads = o->threads ? o->threads : default_threads();
        eo.base_id = file_label(o->base);
        eo.post_id = file_label(o->post);

        const TensorMap base = load_checkpoint(o->base);
        const TensorMap post = load_checkpoint(o->post);
        const VectorBundle b = extract_behavioral_vectors(base, post, spec, eo);
        write_bundle(b, o->out);

        std::map<std::pair<uint32_t, Site>, std::vector<double>> sigmas;
        for (const auto& v : b.vectors) sigmas[{v.layer, v.site}].push_back(v.sigma);
        std::printf("%s: %zu vectors, %u layers, d_model %u, k %u, %s\n", o->out.c_str(), b.vectors.size(), b.n_layers,
                    b.d_model, b.k, b.subtract ? "diff" : "raw");
        for (const auto& note : b.site_notes) {
            const DirectionKey key{note.layer, note.site, 0};
            const std::string name = key.render().substr(0, key.render().find('_'));
            const auto it = sigmas.find({note.layer, note.site});
            if (it == sigmas.end() || it->second.empty()) {
                std::printf("  %-5s rank 0\n", name.c_str());
                continue;
            }
            const auto& s = it->second;
            std::printf("  %-5s %u/%u  sigma %.6g .. %.6g%s\n", name.c_str(), note.returned, note.requested, s.front(),
                        s.back(), note.converged ? "" : "  (not converged)");
        }
        if (b.vectors.empty())
            std::fprintf(stderr, "warning: no behavioral vectors extracted (weight difference is zero at every selected site)\n");
    });
}

// ---------------------------------------------------------------- calibrate

void add_calibrate(CLI::App& app) {
    struct Opts {
        std::string bundle, out, init, manifest, exclude;
        std::vector<std::string> traces;
        double epsilon = 0.01, trim_q = 0.001;
        bool no_exclude = false, reservoir = false, trim = false;
        uint64_t reservoir_cap = uint64_t{1} << 20, seed = 0;
        unsigned threads = 0;
    };
    auto o = std::make_shared<Opts>();
    auto* cmd = app.add_subcommand("calibrate", "Fold traces into calibrated similarity ranges");
    cmd->add_option("--bundle", o->bundle, "Vector bundle (.wwvb)")->required();
    cmd->add_option("-o,--out", o->out, "Output state (.wwms)")->required();
    cmd->add_option("--init", o->init, "Continue from an existing state");
    cmd->add_option("traces", o->traces, "Trace files (.wwtr)");
    cmd->add_option("--manifest", o->manifest, "Trace manifest (JSON)");
    cmd->add_option("--epsilon", o->epsilon, "Range slack")->capture_default_str();
    cmd->add_option("--exclude-layers", o->exclude, "Comma-separated excluded layers (default: last three)");
    cmd->add_flag("--no-exclude", o->no_exclude, "Monitor every layer");
    cmd->add_flag("--reservoir", o->reservoir, "Keep similarity reservoirs (needed for --trim)");
    cmd->add_option("--reservoir-cap", o->reservoir_cap, "Reservoir size per range")->capture_default_str();
    cmd->add_flag("--trim", o->trim, "Trim ranges to inner quantiles after calibration");
    cmd->add_option("--trim-q", o->trim_q, "Trim quantile")->capture_default_str();
    cmd->add_option("--seed", o->seed, "Reservoir sampling seed")->capture_default_str();
    cmd->add_option("--threads", o->threads, "Worker threads (0: WW_THREADS or all cores)");
    cmd->callback([o] {
        const VectorBundle bundle = read_bundle(o->bundle);
        const auto entries = gather_traces(o->traces, o->manifest);
        MonitorState state;
        if (!o->init.empty()) {
            state = read_state(o->init);
        } else {
            MonitorConfig cfg;
            cfg.epsilon = o->epsilon;
            cfg.keep_reservoir = o->reservoir || o->trim;
            cfg.reservoir_cap = o->reservoir_cap;
            cfg.seed = o->seed;
            if (o->no_exclude || !o->exclude.empty()) cfg.excluded_layers = exclusions_from(o->exclude, o->no_exclude, {});
            state = make_state(bundle, cfg);
        }
        const DirectionIndex index(bundle, state.excluded_layers);
        check_compatible(index, state);

        // Contiguous chunks calibrated independently, merged in order.
        const unsigned threads = o->threads ? o->threads : default_threads();
        const size_t chunks = std::min<size_t>(threads, entries.size());
        MonitorState empty = state;
        for (auto& [k, e] : empty.ranges) e = RangeEntry{};
        empty.zero_vectors = 0;
        std::vector<MonitorState> parts(chunks, empty);
        parallel_for(chunks, threads, [&](size_t c) {
            const size_t lo = entries.size() * c / chunks, hi = entries.size() * (c + 1) / chunks;
            for (size_t i = lo; i < hi; ++i) scan_trace(index, parts[c], load_trace_checked(entries[i].path), Mode::calibrate);
        });
        for (const auto& p : parts) state = merge(state, p);
        if (o->trim) trim_ranges(state, o->trim_q);
        state.mode = Mode::calibrate;
        write_state(state, o->out);

        const BoundInputs b = bound_inputs(state, index);
        std::printf("%s: %zu traces, %llu monitored directions, n = %llu, zero vectors %llu%s\n", o->out.c_str(),
                    entries.size(), (unsigned long long)b.t, (unsigned long long)b.n,
                    (unsigned long long)state.zero_vectors, o->trim ? ", trimmed" : "");
        if (state.trim_approximate) std::fprintf(stderr, "warning: trim used sampled reservoirs; quantiles are approximate\n");
    });
}

// ---------------------------------------------------------------- monitor

void add_monitor(CLI::App& app) {
    struct Opts {
        std::string bundle, state, manifest, out_dir, summary, save_state;
        std::vector<std::string> traces;
        bool freeze = false;
        std::optional<double> epsilon;
        unsigned threads = 0;
    };
    auto o = std::make_shared<Opts>();
    auto* cmd = app.add_subcommand("monitor", "Scan traces against calibrated ranges");
    cmd->add_option("--bundle", o->bundle, "Vector bundle (.wwvb)")->required();
    cmd->add_option("--state", o->state, "Calibrated state (.wwms)")->required();
    cmd->add_option("traces", o->traces, "Trace files (.wwtr)");
    cmd->add_option("--manifest", o->manifest, "Trace manifest with generic/anomalous labels");
    cmd->add_flag("--freeze", o->freeze, "Do not widen ranges on flagged inputs");
    cmd->add_option("--epsilon", o->epsilon, "Override the state's range slack");
    cmd->add_option("--out-dir", o->out_dir, "Write one report per trace here");
    cmd->add_option("--summary", o->summary, "Write the summary JSON here");
    cmd->add_option("--save-state", o->save_state, "Write the updated state (monitor mode)");
    cmd->add_option("--threads", o->threads, "Worker threads for --freeze (0: WW_THREADS or all cores)");
    cmd->callback([o] {
        const VectorBundle bundle = read_bundle(o->bundle);
        MonitorState state = read_state(o->state);
        if (o->epsilon) state.epsilon = *o->epsilon;
        const DirectionIndex index(bundle, state.excluded_layers);
        check_compatible(index, state);
        const auto entries = gather_traces(o->traces, o->manifest);
        const Mode mode = o->freeze ? Mode::freeze : Mode::monitor;
        const BoundInputs bound = bound_inputs(state, index);

        // Freeze leaves ranges untouched, so traces are independent.
        std::vector<Report> reports(entries.size());
        auto scan_one = [&](size_t i, MonitorState& st) {
            reports[i] = scan_trace(index, st, load_trace_checked(entries[i].path), mode, stem(entries[i].path));
            reports[i].input_checksum = file_checksum(entries[i].path);
        };
        if (o->freeze) {
            parallel_for(entries.size(), o->threads ? o->threads : default_threads(), [&](size_t i) {
                MonitorState st = state;
                scan_one(i, st);
            });
        } else {
            for (size_t i = 0; i < entries.size(); ++i) scan_one(i, state);
        }

        if (!o->out_dir.empty()) ensure_dir(o->out_dir);
        json rows = json::array();
        uint64_t tp = 0, fn = 0, fp = 0, tn = 0, unlabeled_flagged = 0;
        for (size_t i = 0; i < entries.size(); ++i) {
            const json rj = report_to_json(reports[i], state);
            if (!o->out_dir.empty()) write_json((fs::path(o->out_dir) / (stem(entries[i].path) + ".report.json")).string(), rj);
            // Flag decision recomputed from the event log.
            const bool flagged = !rj["events"].empty();
            const std::string& label = entries[i].label;
            if (label == "anomalous") (flagged ? tp : fn) += 1;
            else if (label == "generic") (flagged ? fp : tn) += 1;
            else unlabeled_flagged += flagged;
            rows.push_back({{"trace", entries[i].path}, {"label", label.empty() ? json(nullptr) : json(label)},
                            {"flagged", flagged}, {"events", rj["events"].size()}, {"input_checksum", reports[i].input_checksum}});
            std::printf("%-8s %s%s%s (%zu events)\n", flagged ? "FLAGGED" : "ok", entries[i].path.c_str(),
                        label.empty() ? "" : " [", label.empty() ? "" : (label + "]").c_str(), rj["events"].size());
        }
        json summary = {{"mode", std::string(to_string(mode))},
                        {"bundle_checksum", state.bundle_checksum},
                        {"epsilon", state.epsilon},
                        {"traces", rows},
                        {"t", bound.t},
                        {"n", bound.n}};
        const double b = bound.n > 0 ? fpr_bound(bound.t, bound.n) : 1.0;
        summary["fpr_bound"] = b;
        if (tp + fn > 0) summary["tpr"] = double(tp) / double(tp + fn);
        if (fp + tn > 0) summary["fpr"] = double(fp) / double(fp + tn);
        summary["counts"] = {{"tp", tp}, {"fn", fn}, {"fp", fp}, {"tn", tn}, {"unlabeled_flagged", unlabeled_flagged}};
        if (tp + fn + fp + tn > 0) {
            std::printf("\n%-10s %8s %8s\n", "label", "flagged", "total");
            if (tp + fn) std::printf("%-10s %8llu %8llu   TPR %.4f\n", "anomalous", (unsigned long long)tp, (unsigned long long)(tp + fn), double(tp) / double(tp + fn));
            if (fp + tn) std::printf("%-10s %8llu %8llu   FPR %.4f   fpr_bound(t=%llu, n=%llu) %.4f\n", "generic", (unsigned long long)fp,
                                     (unsigned long long)(fp + tn), double(fp) / double(fp + tn), (unsigned long long)bound.t,
                                     (unsigned long long)bound.n, b);
        }
        if (!o->summary.empty()) write_json(o->summary, summary);
        if (!o->save_state.empty()) write_state(state, o->save_state);
    });
}

// ---------------------------------------------------------------- steer

void add_steer(CLI::App& app) {
    struct Opts {
        std::string bundle, state, manifest, out_dir;
        std::vector<std::string> traces;
        unsigned threads = 0;
    };
    auto o = std::make_shared<Opts>();
    auto* cmd = app.add_subcommand("steer", "Orthogonalize trace activations against violated directions");
    cmd->add_option("--bundle", o->bundle, "Vector bundle (.wwvb)")->required();
    cmd->add_option("--state", o->state, "Calibrated state (.wwms)")->required();
    cmd->add_option("traces", o->traces, "Trace files (.wwtr)");
    cmd->add_option("--manifest", o->manifest, "Trace manifest");
    cmd->add_option("--out-dir", o->out_dir, "Output directory for steered traces and reports")->required();
    cmd->add_option("--threads", o->threads, "Worker threads (0: WW_THREADS or all cores)");
    cmd->callback([o] {
        const VectorBundle bundle = read_bundle(o->bundle);
        MonitorState state = read_state(o->state);
        state.mode = Mode::steer;
        const DirectionIndex index(bundle, state.excluded_layers);
        check_compatible(index, state);
        const auto entries = gather_traces(o->traces, o->manifest);
        ensure_dir(o->out_dir);
        std::vector<SteeredTrace> results(entries.size());
        parallel_for(entries.size(), o->threads ? o->threads : default_threads(), [&](size_t i) {
            results[i] = steer_trace(index, state, load_trace_checked(entries[i].path), stem(entries[i].path));
            results[i].report.input_checksum = file_checksum(entries[i].path);
            const std::string base = (fs::path(o->out_dir) / stem(entries[i].path)).string();
            write_trace(results[i].trace, base + ".steered.wwtr");
            write_json(base + ".report.json", report_to_json(results[i].report, state));
        });
        for (size_t i = 0; i < entries.size(); ++i) {
            std::string keys;
            for (const auto& k : results[i].report.steering_triggered) keys += (keys.empty() ? "" : ", ") + k.render();
            std::printf("%s: Steering directions triggered: %s\n", entries[i].path.c_str(), keys.empty() ? "none" : keys.c_str());
        }
    });
}

// ---------------------------------------------------------------- serve

void add_serve(CLI::App& app) {
    struct Opts {
        std::string bundle, state, mode = "monitor", save_state;
    };
    auto o = std::make_shared<Opts>();
    auto* cmd = app.add_subcommand("serve", "NDJSON streaming server on stdin/stdout");
    cmd->add_option("--bundle", o->bundle, "Vector bundle (.wwvb)")->required();
    cmd->add_option("--state", o->state, "Calibrated state (.wwms)")->required();
    cmd->add_option("--mode", o->mode, "monitor | freeze | steer")->capture_default_str()->check(CLI::IsMember({"monitor", "freeze", "steer"}));
    cmd->add_option("--save-state", o->save_state, "Write the state on exit (monitor mode)");
    cmd->callback([o] {
        const VectorBundle bundle = read_bundle(o->bundle);
        MonitorState state = read_state(o->state);
        const DirectionIndex index(bundle, state.excluded_layers);
        std::ios::sync_with_stdio(false);
        const ServeStats s = serve_stdio(std::cin, std::cout, index, state, mode_from_string(o->mode));
        std::cout.flush();
        std::fprintf(stderr, "served %zu requests, %zu streams, %zu errors\n", s.requests, s.streams, s.errors);
        if (!o->save_state.empty()) write_state(state, o->save_state);
    });
}

} // namespace wwcli
