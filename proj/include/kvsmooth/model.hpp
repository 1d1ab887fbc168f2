// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace kvsmooth {

using TokenId = std::uint32_t;

enum class NormKind { PreNormRms, PreNormLayer };

struct ModelConfig {
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    std::size_t head_dim = 16;
    std::size_t hidden_dim = 64;  // must equal num_heads * head_dim
    std::size_t ffn_dim = 256;
    std::size_t vocab_size = 256;
    std::size_t max_seq_len = 1024;
    NormKind norm_kind = NormKind::PreNormRms;
    double rope_base = 10000.0;
    std::uint64_t seed = 1;

    // Throws Error{InvalidConfig}.
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerWeights {
    std::vector<float> attn_norm;  // [hidden]
    std::vector<float> wq, wk, wv, wo;  // [hidden x hidden], row-major (out x in)
    std::vector<float> ffn_norm;  // [hidden]
    std::vector<float> w_up;  // [ffn x hidden]
    std::vector<float> w_down;  // [hidden x ffn]
};

struct Weights {
    std::vector<float> embedding;  // [vocab x hidden]
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;  // [hidden]
    std::vector<float> unembedding;  // [vocab x hidden]
};

struct Model {
    ModelConfig config;
    Weights weights;
};

// A named view over one tensor, in the canonical (file) order.
struct TensorRef {
    std::string name;
    std::vector<std::size_t> shape;
    const std::vector<float>* data;
};

std::vector<TensorRef> tensor_manifest(const Model& model);

// Throws Error{HeaderInconsistent} when a tensor's size disagrees with the
// config, Error{NonFinite} for NaN/Inf.
void validate(const Model& model);

// Deterministic, platform-independent initialisation: mt19937_64 seeded with
// config.seed drives uniform draws in [-a, a] with a = sqrt(3 / fan_in), so
// every projection is variance preserving and logits stay O(1). Norm gains
// are 1. Tensors are drawn in manifest order.
Model init_random(const ModelConfig& config);

// FNV-1a over the raw little-endian float bytes of every tensor, manifest order.
std::uint64_t checksum(const Model& model);

// Weight file: "KVSM", u32 LE version (=1), u32 LE header length, UTF-8 JSON
// header {config, tensors:[{name, shape, offset}]}, then f32 LE row-major
// payload in manifest order. Offsets are bytes from the payload start.
inline constexpr std::uint32_t kWeightFormatVersion = 1;

void save_weights(const Model& model, const std::filesystem::path& path);
Model load_weights(const std::filesystem::path& path);

std::string to_hex(std::uint64_t v);

}  // namespace kvsmooth
