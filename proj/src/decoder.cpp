// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvsmooth/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kvsmooth/error.hpp"
#include "kvsmooth/kernels.hpp"

namespace kvsmooth {

namespace {

constexpr float kNormEps = 1e-5f;

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace

TokenId argmax(std::span<const float> logits) {
    if (logits.empty()) throw Error(Errc::EmptyInput, "argmax of empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
}

Decoder::Decoder(const Model& model, DecodeOptions options) : model_(&model), options_(options) {
    validate(model);
    const auto& c = model.config;
    x_.resize(c.hidden_dim);
    xn_.resize(c.hidden_dim);
    q_.resize(c.hidden_dim);
    k_.resize(c.hidden_dim);
    v_.resize(c.hidden_dim);
    attn_.resize(c.hidden_dim);
    proj_.resize(c.hidden_dim);
    up_.resize(c.ffn_dim);
    saved_tail_.resize(c.hidden_dim);
    scores_.resize(c.num_heads * c.max_seq_len);
    out_.logits.resize(c.vocab_size);
    out_.attention.resize(c.num_layers);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        out_.attention[l].layer = l;
        out_.attention[l].num_heads = c.num_heads;
        out_.attention[l].probs.reserve(c.num_heads * c.max_seq_len);
    }
    for (std::size_t i = 0; i < c.head_dim / 2; ++i) {
        inv_freq_.push_back(std::pow(c.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(c.head_dim)));
    }
}

void Decoder::norm(std::span<const float> x, std::span<const float> gain, std::span<float> out) const {
    const std::size_t n = x.size();
    if (model_->config.norm_kind == NormKind::PreNormRms) {
        float ss = 0.0f;
        for (float v : x) ss += v * v;
        const float inv = 1.0f / std::sqrt(ss / static_cast<float>(n) + kNormEps);
        for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * inv * gain[i];
    } else {
        float mean = 0.0f;
        for (float v : x) mean += v;
        mean /= static_cast<float>(n);
        float var = 0.0f;
        for (float v : x) var += (v - mean) * (v - mean);
        const float inv = 1.0f / std::sqrt(var / static_cast<float>(n) + kNormEps);
        for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv * gain[i];
    }
}

// Rotates consecutive pairs (2i, 2i+1) of every head; an odd trailing
// component is left as is.
void Decoder::rotate(std::span<float> v, std::size_t position) const {
    const auto& c = model_->config;
    for (std::size_t h = 0; h < c.num_heads; ++h) {
        float* head = v.data() + h * c.head_dim;
        for (std::size_t i = 0; i < inv_freq_.size(); ++i) {
            const double angle = static_cast<double>(position) * inv_freq_[i];
            const auto cs = static_cast<float>(std::cos(angle));
            const auto sn = static_cast<float>(std::sin(angle));
            const float a = head[2 * i];
            const float b = head[2 * i + 1];
            head[2 * i] = a * cs - b * sn;
            head[2 * i + 1] = a * sn + b * cs;
        }
    }
}

const StepOutput& Decoder::forward_step(KVCache& cache, TokenId token, std::size_t position,
                                        StepInterceptor* interceptor) {
    const auto& c = model_->config;
    const auto& w = model_->weights;
    if (cache.num_layers() != c.num_layers || cache.num_heads() != c.num_heads ||
        cache.head_dim() != c.head_dim || cache.capacity() != c.max_seq_len) {
        throw Error(Errc::CacheInconsistent, "cache was built for a different model");
    }
    if (position != cache.length()) {
        throw Error(Errc::PositionMismatch, "position " + std::to_string(position) +
                                                " but cache holds " + std::to_string(cache.length()));
    }
    if (position >= c.max_seq_len) throw Error(Errc::BudgetExceeded, "position beyond max_seq_len");
    if (token >= c.vocab_size) throw Error(Errc::InvalidToken, "token " + std::to_string(token));

    const std::size_t hd = c.hidden_dim;
    std::copy_n(w.embedding.begin() + static_cast<std::ptrdiff_t>(token * hd), hd, x_.begin());

    const std::size_t context = position + 1;
    const kernels::AttentionShape shape{c.num_heads, c.head_dim, context};

    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const auto& lw = w.layers[l];
        norm(x_, lw.attn_norm, xn_);
        kernels::matvec(lw.wq, hd, hd, xn_, q_);
        kernels::matvec(lw.wk, hd, hd, xn_, k_);
        kernels::matvec(lw.wv, hd, hd, xn_, v_);
        rotate(q_, position);
        rotate(k_, position);
        cache.stage(l, k_, v_);

        auto& snap = out_.attention[l];
        snap.context = context;
        snap.probs.resize(c.num_heads * context);
        kernels::attend(shape, q_, cache.layer_keys(l), cache.layer_values(l), scores_, snap.probs, attn_);

        if (interceptor != nullptr) {
            if (options_.smooth_before_output) {
                for (std::size_t h = 0; h < c.num_heads; ++h) {
                    auto tail = cache.value(l, position, h);
                    std::copy(tail.begin(), tail.end(), saved_tail_.begin() + static_cast<std::ptrdiff_t>(h * c.head_dim));
                }
            }
            LayerContext ctx{l, position, snap, CacheTailView(cache, l), attn_};
            interceptor->on_layer(ctx);
            if (options_.smooth_before_output) {
                bool changed = false;
                for (std::size_t h = 0; h < c.num_heads && !changed; ++h) {
                    auto tail = cache.value(l, position, h);
                    changed = !std::equal(tail.begin(), tail.end(),
                                          saved_tail_.begin() + static_cast<std::ptrdiff_t>(h * c.head_dim));
                }
                if (changed) kernels::mix_values(shape, snap.probs, cache.layer_values(l), attn_);
            }
        }

        kernels::matvec(lw.wo, hd, hd, attn_, proj_);
        for (std::size_t i = 0; i < hd; ++i) x_[i] += proj_[i];

        norm(x_, lw.ffn_norm, xn_);
        kernels::matvec(lw.w_up, c.ffn_dim, hd, xn_, up_);
        for (float& u : up_) u = silu(u);
        kernels::matvec(lw.w_down, hd, c.ffn_dim, up_, proj_);
        for (std::size_t i = 0; i < hd; ++i) x_[i] += proj_[i];
    }
    cache.commit();

    norm(x_, w.final_norm, xn_);
    kernels::matvec(w.unembedding, c.vocab_size, hd, xn_, out_.logits);
    return out_;
}

GenerationResult Decoder::greedy_decode(std::span<const TokenId> prompt, std::size_t max_new_tokens,
                                        StepInterceptor* interceptor, StepObserver* observer) {
    KVCache cache(model_->config);
    return greedy_decode(cache, prompt, max_new_tokens, interceptor, observer);
}

GenerationResult Decoder::greedy_decode(KVCache& cache, std::span<const TokenId> prompt,
                                        std::size_t max_new_tokens, StepInterceptor* interceptor,
                                        StepObserver* observer) {
    const auto& c = model_->config;
    if (cache.length() != 0) throw Error(Errc::CacheInconsistent, "greedy_decode needs an empty cache");
    if (prompt.empty()) throw Error(Errc::EmptyInput, "prompt must not be empty");
    if (prompt.size() + max_new_tokens > c.max_seq_len) {
        throw Error(Errc::BudgetExceeded, "prompt (" + std::to_string(prompt.size()) + ") + max_new_tokens (" +
                                              std::to_string(max_new_tokens) + ") exceeds max_seq_len " +
                                              std::to_string(c.max_seq_len));
    }
    for (TokenId t : prompt) {
        if (t >= c.vocab_size) throw Error(Errc::InvalidToken, "prompt token " + std::to_string(t));
    }

    GenerationResult result;
    result.prompt.assign(prompt.begin(), prompt.end());
    if (interceptor != nullptr) interceptor->begin_sequence(prompt.size());

    auto notify = [&](std::size_t pos, TokenId input, bool prefill, std::optional<TokenId> emitted) {
        if (observer == nullptr) return;
        observer->on_step(StepView{pos, input, prefill, emitted, out_.logits, out_.attention});
    };

    StepInterceptor* prefill_hook = options_.intercept_prefill ? interceptor : nullptr;
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        forward_step(cache, prompt[i], i, prefill_hook);
        const bool last = i + 1 == prompt.size();
        std::optional<TokenId> emitted;
        if (last && max_new_tokens > 0) emitted = argmax(out_.logits);
        notify(i, prompt[i], true, emitted);
        if (emitted) result.generated.push_back(*emitted);
    }

    auto hit_eos = [&] {
        return options_.eos_id && !result.generated.empty() && result.generated.back() == *options_.eos_id;
    };
    while (result.generated.size() < max_new_tokens && !hit_eos()) {
        const TokenId input = result.generated.back();
        const std::size_t pos = cache.length();
        forward_step(cache, input, pos, interceptor);
        const TokenId next = argmax(out_.logits);
        notify(pos, input, false, next);
        result.generated.push_back(next);
    }
    result.stopped_on_eos = hit_eos();
    return result;
}

}  // namespace kvsmooth
