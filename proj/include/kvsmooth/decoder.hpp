// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "kvsmooth/kv_cache.hpp"
#include "kvsmooth/model.hpp"

namespace kvsmooth {

// The current query's attention rows for every head of one layer.
struct AttentionSnapshot {
    std::size_t layer = 0;
    std::size_t num_heads = 0;
    std::size_t context = 0;
    std::vector<double> probs;  // [num_heads x context]

    std::span<const double> row(std::size_t head) const {
        return std::span<const double>(probs).subspan(head * context, context);
    }
};

// Handed to an interceptor once per (layer, step), after the layer's
// attention weights and head outputs are computed and before the output
// projection.
struct LayerContext {
    std::size_t layer;
    std::size_t position;
    const AttentionSnapshot& attention;
    CacheTailView cache;
    std::span<float> attn_output;  // concatenated head outputs [hidden]
};

class StepInterceptor {
public:
    virtual ~StepInterceptor() = default;
    // Called by greedy_decode before the first prompt position.
    virtual void begin_sequence(std::size_t /*prompt_length*/) {}
    virtual void on_layer(LayerContext& ctx) = 0;
};

struct StepView {
    std::size_t position;
    TokenId input;
    bool prefill;
    // The token chosen from these logits, when this pass emits one.
    std::optional<TokenId> emitted;
    std::span<const float> logits;
    std::span<const AttentionSnapshot> attention;
};

class StepObserver {
public:
    virtual ~StepObserver() = default;
    virtual void on_step(const StepView& step) = 0;
};

struct DecodeOptions {
    // Recompute the current step's head outputs from the cache after the
    // interceptor runs, so smoothed values also feed the current output.
    bool smooth_before_output = false;
    // Run the interceptor on prompt positions too.
    bool intercept_prefill = false;
    std::optional<TokenId> eos_id;
};

struct StepOutput {
    std::vector<float> logits;
    std::vector<AttentionSnapshot> attention;  // one per layer
};

struct GenerationResult {
    std::vector<TokenId> prompt;
    std::vector<TokenId> generated;
    bool stopped_on_eos = false;
};

// Lowest id wins ties.
TokenId argmax(std::span<const float> logits);

// Pre-norm decoder-only transformer with rotary positions on Q and K.
// Holds only scratch buffers; the model is borrowed and must outlive it.
class Decoder {
public:
    explicit Decoder(const Model& model, DecodeOptions options = {});

    const Model& model() const noexcept { return *model_; }
    const DecodeOptions& options() const noexcept { return options_; }

    // Appends this position's K,V to every layer, attends over positions
    // 0..position, and returns final-layer logits. The returned reference is
    // valid until the next call.
    const StepOutput& forward_step(KVCache& cache, TokenId token, std::size_t position,
                                   StepInterceptor* interceptor = nullptr);

    GenerationResult greedy_decode(std::span<const TokenId> prompt, std::size_t max_new_tokens,
                                   StepInterceptor* interceptor = nullptr,
                                   StepObserver* observer = nullptr);
    // Same, decoding into a caller-owned cache which must start empty; the
    // cache is left holding every processed position.
    GenerationResult greedy_decode(KVCache& cache, std::span<const TokenId> prompt,
                                   std::size_t max_new_tokens, StepInterceptor* interceptor = nullptr,
                                   StepObserver* observer = nullptr);

private:
    void norm(std::span<const float> x, std::span<const float> gain, std::span<float> out) const;
    void rotate(std::span<float> v, std::size_t position) const;

    const Model* model_;
    DecodeOptions options_;
    StepOutput out_;
    std::vector<float> x_, xn_, q_, k_, v_, attn_, proj_, up_, saved_tail_;
    std::vector<double> scores_;
    std::vector<double> inv_freq_;
};

}  // namespace kvsmooth
