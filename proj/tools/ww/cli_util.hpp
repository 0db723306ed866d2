// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ww/monitor.hpp"

namespace wwcli {

struct TraceEntry {
    std::string path;
    std::string label; // empty when unlabeled
};

// Manifest: {"traces": [{"path": "...", "label": "generic" | "anomalous"}]};
// relative paths resolve against the manifest's directory.
std::vector<TraceEntry> read_manifest(const std::string& path);
void write_manifest(const std::vector<TraceEntry>& entries, const std::string& path);

// Positional traces plus an optional manifest, in that order.
std::vector<TraceEntry> gather_traces(const std::vector<std::string>& paths, const std::string& manifest);

std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& text);
void write_json(const std::string& path, const nlohmann::json& j);
void ensure_dir(const std::string& dir);
std::string stem(const std::string& path);

std::vector<uint32_t> parse_u32_list(const std::string& text);
std::vector<double> parse_double_list(const std::string& text);

// Monitored direction count t and n = 1 + smallest per-role calibration count.
struct BoundInputs {
    uint64_t t = 0;
    uint64_t n = 0;
};
BoundInputs bound_inputs(const ww::MonitorState& state, const ww::DirectionIndex& index);

void add_extract(CLI::App& app);
void add_calibrate(CLI::App& app);
void add_monitor(CLI::App& app);
void add_steer(CLI::App& app);
void add_serve(CLI::App& app);
void add_baseline(CLI::App& app);
void add_synth(CLI::App& app);
void add_fpr_bound(CLI::App& app);

} // namespace wwcli
