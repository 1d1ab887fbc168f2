// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "kvsmooth/decoder.hpp"
#include "kvsmooth/kv_cache.hpp"
#include "kvsmooth/numerics.hpp"

namespace kvsmooth {

enum class SmoothTarget { KeyValue, KeyOnly, AttnOutput };
enum class SmoothMode { Adaptive, Fixed };

struct SmootherConfig {
    double lambda_ref = 0.9;
    double clip_width = 0.2;
    std::size_t queue_capacity = 15;
    // Inclusive layer range; layer_start == layer_end + 1 selects no layers.
    std::size_t layer_start = 3;
    std::size_t layer_end = 31;
    SmoothTarget target = SmoothTarget::KeyValue;
    SmoothMode mode = SmoothMode::Adaptive;
    double fixed_lambda = 0.0;  // used when mode == Fixed
    double eps = numerics::kDefaultEntropyEps;

    // Throws Error{InvalidConfig}.
    void validate(std::size_t num_layers) const;
};

void to_json(nlohmann::json& j, const SmootherConfig& c);
void from_json(const nlohmann::json& j, SmootherConfig& c);

// Per-layer FIFO of recent row-entropies, oldest first.
class EntropyQueue {
public:
    EntropyQueue(std::size_t num_layers, std::size_t capacity);

    // Inserts z (evicting the oldest value when full) and returns how many
    // values in the queue, after insertion, are strictly smaller than z.
    std::size_t push_and_rank(std::size_t layer, double z);

    const std::deque<double>& values(std::size_t layer) const { return queues_.at(layer); }
    std::size_t capacity() const noexcept { return capacity_; }
    void clear();

private:
    std::size_t capacity_;
    std::vector<std::deque<double>> queues_;
};

struct SmoothDecision {
    std::size_t layer = 0;
    std::size_t step = 0;  // cache position that was smoothed
    double z = 0.0;
    std::optional<std::size_t> rank;  // adaptive mode only
    std::optional<double> lambda_hat;  // adaptive mode only
    double lambda_tilde = 0.0;
};

// Head-averaged entropy of the current query's attention rows. Throws
// Error{EmptyInput} when the snapshot has no heads or rows are missing.
double row_entropy(const AttentionSnapshot& snapshot, double eps = numerics::kDefaultEntropyEps);

// k / M. The divisor is the queue capacity even while the queue is still
// filling, so early coefficients are biased low. Throws Error{InvalidConfig}
// for k >= M.
double adaptive_lambda(std::size_t k, std::size_t capacity);

// Clamp of lambda_hat into [lambda_ref - w, lambda_ref + w], then into [0, 1].
double clip_lambda(double lambda_hat, double lambda_ref, double clip_width);

// In-place EMA of the newest cache position against its predecessor:
//   K_t <- (1 - lambda) K_t + lambda K_{t-1}   (and V_t for KeyValue)
// K_{t-1} is whatever the cache holds, i.e. already smoothed, which makes the
// recursion a true exponential moving average. A no-op at t == 0 and for the
// AttnOutput target.
void smooth_cache_tail(CacheTailView& tail, double lambda, SmoothTarget target);
// Same, addressed by layer and position; t must be the layer's newest position.
void smooth_cache_tail(KVCache& cache, std::size_t layer, std::size_t t, double lambda, SmoothTarget target);

// Entropy-guided adaptive EMA smoothing as a decoder interceptor. One
// instance serves one generation at a time; begin_sequence() resets the
// queues, the per-layer output state and the decision log.
class EmaSmoother final : public StepInterceptor {
public:
    EmaSmoother(const SmootherConfig& config, const ModelConfig& model);

    void begin_sequence(std::size_t prompt_length) override;
    void on_layer(LayerContext& ctx) override;

    const SmootherConfig& config() const noexcept { return config_; }
    const std::vector<SmoothDecision>& decisions() const noexcept { return decisions_; }
    const EntropyQueue& queue() const noexcept { return queue_; }
    void set_record_decisions(bool on) noexcept { record_ = on; }

private:
    SmootherConfig config_;
    EntropyQueue queue_;
    std::vector<std::vector<float>> prev_output_;  // AttnOutput target state
    std::vector<bool> has_prev_output_;
    std::vector<SmoothDecision> decisions_;
    bool record_ = true;
};

std::unique_ptr<EmaSmoother> make_interceptor(const SmootherConfig& config, const ModelConfig& model);

// Scalar MAP estimate of a hidden state under a Gaussian observation model
// N(o; h, var_obs) and random-walk prior N(h; h_prev, var_prior).
struct MapOracleInputs {
    double observation;
    double previous;
    double var_obs;
    double var_prior;
};

struct MapOracleResult {
    double numeric;      // maximiser found by bracketed search on the objective
    double closed_form;  // (1 - lambda) o + lambda h_prev, lambda = var_obs / (var_prior + var_obs)
};

double map_objective(const MapOracleInputs& in, double h);
// Throws Error{InvalidConfig} for non-positive variances.
MapOracleResult map_oracle(const MapOracleInputs& in);

}  // namespace kvsmooth
