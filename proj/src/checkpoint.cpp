// SPDX-License-Identifier: Apache-2.0
#include "ww/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "ww/half.hpp"

namespace ww {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

using json = nlohmann::json;

size_t dtype_width(DType dt) {
    return dt == DType::f32 ? 4 : 2;
}

std::string_view dtype_name(DType dt) {
    switch (dt) {
    case DType::f16: return "F16";
    case DType::bf16: return "BF16";
    case DType::f32: return "F32";
    }
    return "?";
}

DType dtype_from_name(std::string_view name) {
    if (name == "F16") return DType::f16;
    if (name == "BF16") return DType::bf16;
    if (name == "F32") return DType::f32;
    throw FormatError("unsupported dtype '" + std::string(name) + "'");
}

size_t Tensor::numel() const {
    size_t n = 1;
    for (int64_t d : shape) n *= static_cast<size_t>(d);
    return n;
}

std::vector<float> Tensor::to_f32() const {
    const size_t n = numel();
    std::vector<float> out(n);
    switch (dtype) {
    case DType::f32:
        std::memcpy(out.data(), data.data(), n * 4);
        break;
    case DType::f16:
        for (size_t i = 0; i < n; ++i) {
            uint16_t h;
            std::memcpy(&h, data.data() + 2 * i, 2);
            out[i] = f16_to_f32(h);
        }
        break;
    case DType::bf16:
        for (size_t i = 0; i < n; ++i) {
            uint16_t h;
            std::memcpy(&h, data.data() + 2 * i, 2);
            out[i] = bf16_to_f32(h);
        }
        break;
    }
    return out;
}

Tensor Tensor::from_f32(std::vector<int64_t> shape, std::span<const float> values, DType dtype) {
    Tensor t;
    t.dtype = dtype;
    t.shape = std::move(shape);
    if (t.numel() != values.size()) throw ShapeError("tensor value count does not match shape");
    t.data.resize(values.size() * dtype_width(dtype));
    for (size_t i = 0; i < values.size(); ++i) {
        if (dtype == DType::f32) {
            std::memcpy(t.data.data() + 4 * i, &values[i], 4);
        } else {
            const uint16_t h = dtype == DType::f16 ? f32_to_f16(values[i]) : f32_to_bf16(values[i]);
            std::memcpy(t.data.data() + 2 * i, &h, 2);
        }
    }
    return t;
}

TensorMap load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open checkpoint " + path);
    const auto size = static_cast<size_t>(in.tellg());
    in.seekg(0);
    std::vector<uint8_t> bytes(size);
    if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
        throw IoError("read failed: " + path);
    return parse_checkpoint(bytes);
}

TensorMap parse_checkpoint(std::span<const uint8_t> bytes) {
    if (bytes.size() < 8) throw FormatError("malformed header: file shorter than 8 bytes");
    uint64_t header_len;
    std::memcpy(&header_len, bytes.data(), 8);
    if (header_len > bytes.size() - 8) throw FormatError("malformed header: header length exceeds file size");

    const std::string_view header_text(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
    std::set<std::string> seen;
    std::string duplicate;
    json header;
    try {
        header = json::parse(header_text, [&](int depth, json::parse_event_t ev, json& parsed) {
            if (depth == 1 && ev == json::parse_event_t::key) {
                auto name = parsed.get<std::string>();
                if (!seen.insert(name).second && duplicate.empty()) duplicate = name;
            }
            return true;
        });
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed header: ") + e.what());
    }
    if (!duplicate.empty()) throw FormatError("duplicate tensor name '" + duplicate + "'");
    if (!header.is_object()) throw FormatError("malformed header: not a JSON object");

    const std::span<const uint8_t> data = bytes.subspan(8 + header_len);
    TensorMap out;
    std::vector<std::pair<uint64_t, uint64_t>> ranges;
    for (auto& [name, entry] : header.items()) {
        if (name == "__metadata__") continue;
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") || !entry.contains("data_offsets"))
            throw FormatError("malformed header: entry '" + name + "' lacks dtype/shape/data_offsets");
        Tensor t;
        try {
            t.dtype = dtype_from_name(entry.at("dtype").get<std::string>());
            for (const auto& d : entry.at("shape")) {
                const auto v = d.get<int64_t>();
                if (v < 0) throw FormatError("malformed header: negative dimension in '" + name + "'");
                t.shape.push_back(v);
            }
            const auto& offs = entry.at("data_offsets");
            if (!offs.is_array() || offs.size() != 2) throw FormatError("malformed header: bad data_offsets for '" + name + "'");
            const auto begin = offs[0].get<uint64_t>();
            const auto end = offs[1].get<uint64_t>();
            if (begin > end) throw FormatError("malformed header: reversed data_offsets for '" + name + "'");
            if (end - begin != t.numel() * dtype_width(t.dtype))
                throw FormatError("malformed header: byte length of '" + name + "' does not match shape x dtype");
            if (end > data.size()) throw FormatError("truncated data section: '" + name + "' ends past end of file");
            t.data.assign(data.begin() + static_cast<std::ptrdiff_t>(begin), data.begin() + static_cast<std::ptrdiff_t>(end));
            if (end > begin) ranges.emplace_back(begin, end);
        } catch (const json::exception& e) {
            throw FormatError("malformed header: entry '" + name + "': " + e.what());
        }
        out.emplace(name, std::move(t));
    }
    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i) {
        if (ranges[i].first < ranges[i - 1].second) throw FormatError("malformed header: overlapping data_offsets");
    }
    return out;
}

std::vector<uint8_t> serialize_checkpoint(const TensorMap& tensors) {
    json header = json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        if (t.data.size() != t.numel() * dtype_width(t.dtype))
            throw ShapeError("tensor '" + name + "' byte length does not match shape");
        header[name] = {{"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"data_offsets", {offset, offset + t.data.size()}}};
        offset += t.data.size();
    }
    std::string text = header.dump();
    // Pad with spaces so the data section starts 8-byte aligned.
    while ((text.size() % 8) != 0) text.push_back(' ');

    std::vector<uint8_t> out(8 + text.size() + offset);
    const uint64_t n = text.size();
    std::memcpy(out.data(), &n, 8);
    std::memcpy(out.data() + 8, text.data(), text.size());
    size_t pos = 8 + text.size();
    for (const auto& [name, t] : tensors) {
        if (!t.data.empty()) std::memcpy(out.data() + pos, t.data.data(), t.data.size());
        pos += t.data.size();
    }
    return out;
}

void write_checkpoint(const TensorMap& tensors, const std::string& path) {
    const auto bytes = serialize_checkpoint(tensors);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

Eigen::MatrixXf tensor_to_matrix(const Tensor& t, bool transposed) {
    if (t.shape.size() != 2) throw ShapeError("expected a 2-D tensor, got rank " + std::to_string(t.shape.size()));
    const auto rows = static_cast<Eigen::Index>(t.shape[0]);
    const auto cols = static_cast<Eigen::Index>(t.shape[1]);
    const auto values = t.to_f32();
    using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMajor> view(values.data(), rows, cols);
    if (transposed) return view.transpose();
    return view;
}

const std::string& LayerNamingSpec::pattern(Site site) const {
    if (site == Site::attn_out) return attn_out_pattern;
    if (site == Site::mlp_down) return mlp_down_pattern;
    throw UsageError("no weight pattern for site " + std::string(to_string(site)));
}

LayerNamingSpec naming_preset(std::string_view name) {
    if (name == "llama" || name == "mistral" || name == "qwen2" || name == "gemma")
        return {"model.layers.{layer}.self_attn.o_proj.weight", "model.layers.{layer}.mlp.down_proj.weight", 0, false};
    if (name == "gpt2")
        return {"*h.{layer}.attn.c_proj.weight", "*h.{layer}.mlp.c_proj.weight", 0, true};
    if (name == "gpt-neox")
        return {"gpt_neox.layers.{layer}.attention.dense.weight", "gpt_neox.layers.{layer}.mlp.dense_4h_to_h.weight", 0, false};
    if (name == "toy")
        return {"layers.{layer}.attn_out", "layers.{layer}.mlp_down", 0, false};
    throw UsageError("unknown naming preset '" + std::string(name) + "'");
}

std::vector<std::string> naming_preset_names() {
    return {"llama", "mistral", "qwen2", "gemma", "gpt2", "gpt-neox", "toy"};
}

namespace {

bool glob_match(std::string_view pat, std::string_view s) {
    size_t p = 0, i = 0, star = std::string_view::npos, mark = 0;
    while (i < s.size()) {
        if (p < pat.size() && pat[p] == '*') {
            star = p++;
            mark = i;
        } else if (p < pat.size() && pat[p] == s[i]) {
            ++p;
            ++i;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            i = ++mark;
        } else {
            return false;
        }
    }
    while (p < pat.size() && pat[p] == '*') ++p;
    return p == pat.size();
}

std::string instantiate(const std::string& pattern, uint32_t layer) {
    std::string out = pattern;
    const std::string token = "{layer}";
    for (size_t pos = out.find(token); pos != std::string::npos; pos = out.find(token, pos)) {
        out.replace(pos, token.size(), std::to_string(layer));
    }
    return out;
}

std::string shape_str(const Eigen::MatrixXf& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

} // namespace

std::string resolve_tensor_name(const TensorMap& tensors, const std::string& pattern, uint32_t layer) {
    const std::string want = instantiate(pattern, layer);
    if (want.find('*') == std::string::npos) {
        if (!tensors.contains(want)) throw ShapeError("missing tensor '" + want + "'");
        return want;
    }
    std::vector<std::string> hits;
    for (const auto& [name, t] : tensors) {
        if (glob_match(want, name)) hits.push_back(name);
    }
    if (hits.empty()) throw ShapeError("missing tensor: pattern '" + want + "' matches nothing");
    if (hits.size() > 1)
        throw ShapeError("pattern '" + want + "' matches " + std::to_string(hits.size()) + " tensors (e.g. '" + hits[0] + "', '" + hits[1] + "')");
    return hits.front();
}

uint32_t infer_n_layers(const TensorMap& tensors, const LayerNamingSpec& spec) {
    uint32_t n = 0;
    for (;; ++n) {
        try {
            resolve_tensor_name(tensors, spec.attn_out_pattern, n);
            resolve_tensor_name(tensors, spec.mlp_down_pattern, n);
        } catch (const ShapeError&) {
            break;
        }
    }
    return n;
}

LayerPair load_pair(const TensorMap& base, const TensorMap& post, const LayerNamingSpec& spec,
                    uint32_t layer, Site site) {
    const auto& pat = spec.pattern(site);
    const auto base_name = resolve_tensor_name(base, pat, layer);
    std::string post_name;
    try {
        post_name = resolve_tensor_name(post, pat, layer);
    } catch (const ShapeError& e) {
        throw ShapeError(std::string("post checkpoint: ") + e.what());
    }
    LayerPair pair;
    pair.layer = layer;
    pair.site = site;
    pair.base = tensor_to_matrix(base.at(base_name), spec.transposed);
    pair.post = tensor_to_matrix(post.at(post_name), spec.transposed);
    if (pair.base.rows() != pair.post.rows() || pair.base.cols() != pair.post.cols())
        throw ShapeError("shape mismatch at layer " + std::to_string(layer) + " " + std::string(to_string(site)) +
                         ": base " + shape_str(pair.base) + " vs post " + shape_str(pair.post));
    return pair;
}

std::vector<LayerPair> pair_layers(const TensorMap& base, const TensorMap& post, const LayerNamingSpec& spec) {
    const uint32_t n_layers = spec.n_layers ? spec.n_layers : infer_n_layers(base, spec);
    std::vector<LayerPair> pairs;
    pairs.reserve(2 * n_layers);
    for (uint32_t l = 0; l < n_layers; ++l) {
        for (Site s : {Site::attn_out, Site::mlp_down}) {
            pairs.push_back(load_pair(base, post, spec, l, s));
            if (pairs.back().base.rows() != pairs.front().base.rows())
                throw ShapeError("residual width differs across sites: " + std::to_string(pairs.front().base.rows()) +
                                 " vs " + std::to_string(pairs.back().base.rows()) + " at layer " + std::to_string(l));
        }
    }
    return pairs;
}

} // namespace ww
