// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ww/common.hpp"

namespace ww {

enum class DType : uint8_t { f16, bf16, f32 };

size_t dtype_width(DType dt);
std::string_view dtype_name(DType dt); // "F16" | "BF16" | "F32"
DType dtype_from_name(std::string_view name);

struct Tensor {
    DType dtype = DType::f32;
    std::vector<int64_t> shape;
    std::vector<uint8_t> data; // row-major, little-endian

    size_t numel() const;
    // Upcast to f32; value-exact for f16/bf16.
    std::vector<float> to_f32() const;

    static Tensor from_f32(std::vector<int64_t> shape, std::span<const float> values, DType dtype = DType::f32);

    bool operator==(const Tensor&) const = default;
};

using TensorMap = std::map<std::string, Tensor>;

// Single-file container: u64 LE header length N, N bytes of JSON header,
// then the data section addressed by data_offsets relative to 8 + N.
TensorMap load_checkpoint(const std::string& path);
TensorMap parse_checkpoint(std::span<const uint8_t> bytes);
void write_checkpoint(const TensorMap& tensors, const std::string& path);
std::vector<uint8_t> serialize_checkpoint(const TensorMap& tensors);

// Rows index the output (residual) dimension. `transposed` flips a stored
// (d_in x d_out) tensor at load.
Eigen::MatrixXf tensor_to_matrix(const Tensor& t, bool transposed = false);

struct LayerNamingSpec {
    // "{layer}" is replaced by the layer index; "*" matches any run of characters.
    std::string attn_out_pattern;
    std::string mlp_down_pattern;
    uint32_t n_layers = 0; // 0: infer from the base checkpoint
    bool transposed = false;

    const std::string& pattern(Site site) const;
};

// Presets: "llama" (also mistral, qwen2, gemma), "gpt2", "gpt-neox", "toy".
LayerNamingSpec naming_preset(std::string_view name);
std::vector<std::string> naming_preset_names();

// Resolve a pattern for one layer against the tensor names in a map.
// Throws ShapeError when zero or several names match.
std::string resolve_tensor_name(const TensorMap& tensors, const std::string& pattern, uint32_t layer);

// Count consecutive layers (from 0) for which both site patterns resolve.
uint32_t infer_n_layers(const TensorMap& tensors, const LayerNamingSpec& spec);

struct LayerPair {
    uint32_t layer = 0;
    Site site = Site::attn_out;
    Eigen::MatrixXf base;
    Eigen::MatrixXf post;
};

LayerPair load_pair(const TensorMap& base, const TensorMap& post, const LayerNamingSpec& spec,
                    uint32_t layer, Site site);

// 2 x n_layers pairs ordered by (layer, site). All pairs must share one row count.
std::vector<LayerPair> pair_layers(const TensorMap& base, const TensorMap& post, const LayerNamingSpec& spec);

} // namespace ww
