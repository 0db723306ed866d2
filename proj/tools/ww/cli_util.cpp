// SPDX-License-Identifier: Apache-2.0
#include "cli_util.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace wwcli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ww::IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ww::IoError("cannot write " + path);
    out << text;
    if (!out) throw ww::IoError("write failed: " + path);
}

void write_json(const std::string& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ww::IoError("cannot create directory " + dir + ": " + ec.message());
}

std::string stem(const std::string& path) {
    return fs::path(path).stem().string();
}

std::vector<TraceEntry> read_manifest(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw ww::FormatError("manifest " + path + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("traces") || !j["traces"].is_array())
        throw ww::FormatError("manifest " + path + ": expected {\"traces\": [...]}");
    const fs::path base = fs::path(path).parent_path();
    std::vector<TraceEntry> out;
    for (const auto& e : j["traces"]) {
        if (!e.is_object() || !e.contains("path") || !e["path"].is_string())
            throw ww::FormatError("manifest " + path + ": entry without a string 'path'");
        fs::path p = e["path"].get<std::string>();
        if (p.is_relative()) p = base / p;
        const std::string label = e.value("label", std::string());
        if (!label.empty() && label != "generic" && label != "anomalous")
            throw ww::FormatError("manifest " + path + ": label must be 'generic' or 'anomalous', got '" + label + "'");
        out.push_back({p.string(), label});
    }
    return out;
}

void write_manifest(const std::vector<TraceEntry>& entries, const std::string& path) {
    const fs::path base = fs::path(path).parent_path();
    json arr = json::array();
    for (const auto& e : entries) {
        json item = {{"path", fs::path(e.path).lexically_relative(base.empty() ? "." : base).string()}};
        if (!e.label.empty()) item["label"] = e.label;
        arr.push_back(item);
    }
    write_json(path, {{"traces", arr}});
}

std::vector<TraceEntry> gather_traces(const std::vector<std::string>& paths, const std::string& manifest) {
    std::vector<TraceEntry> out;
    for (const auto& p : paths) out.push_back({p, ""});
    if (!manifest.empty()) {
        auto m = read_manifest(manifest);
        out.insert(out.end(), m.begin(), m.end());
    }
    if (out.empty()) throw ww::UsageError("no traces given (pass files or --manifest)");
    return out;
}

namespace {

std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

} // namespace

std::vector<uint32_t> parse_u32_list(const std::string& text) {
    std::vector<uint32_t> out;
    for (const auto& s : split_csv(text)) {
        try {
            size_t pos = 0;
            const unsigned long v = std::stoul(s, &pos);
            if (pos != s.size() || v > UINT32_MAX) throw std::invalid_argument(s);
            out.push_back(static_cast<uint32_t>(v));
        } catch (const std::exception&) {
            throw ww::UsageError("not a non-negative integer: '" + s + "'");
        }
    }
    return out;
}

std::vector<double> parse_double_list(const std::string& text) {
    std::vector<double> out;
    for (const auto& s : split_csv(text)) {
        try {
            size_t pos = 0;
            out.push_back(std::stod(s, &pos));
            if (pos != s.size()) throw std::invalid_argument(s);
        } catch (const std::exception&) {
            throw ww::UsageError("not a number: '" + s + "'");
        }
    }
    return out;
}

BoundInputs bound_inputs(const ww::MonitorState& state, const ww::DirectionIndex& index) {
    BoundInputs b;
    b.t = index.size();
    uint64_t min_n = UINT64_MAX;
    for (const auto& [key, entry] : state.ranges) {
        if (!index.find(key)) continue;
        for (const auto& r : entry.roles)
            if (r.n_tokens > 0) min_n = std::min(min_n, r.n_tokens);
    }
    b.n = min_n == UINT64_MAX ? 0 : min_n + 1;
    return b;
}

} // namespace wwcli
