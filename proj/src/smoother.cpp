// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvsmooth/smoother.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kvsmooth/error.hpp"

namespace kvsmooth {

NLOHMANN_JSON_SERIALIZE_ENUM(SmoothTarget, {
    {SmoothTarget::KeyValue, "key_value"},
    {SmoothTarget::KeyOnly, "key_only"},
    {SmoothTarget::AttnOutput, "attn_output"},
})

NLOHMANN_JSON_SERIALIZE_ENUM(SmoothMode, {
    {SmoothMode::Adaptive, "adaptive"},
    {SmoothMode::Fixed, "fixed"},
})

void SmootherConfig::validate(std::size_t num_layers) const {
    auto fail = [](const std::string& m) { throw Error(Errc::InvalidConfig, m); };
    if (!(lambda_ref >= 0.0 && lambda_ref <= 1.0)) fail("lambda_ref must be in [0,1]");
    if (!(clip_width >= 0.0) || !std::isfinite(clip_width)) fail("clip_width must be >= 0");
    if (queue_capacity < 1) fail("queue_capacity must be >= 1");
    // layer_start == layer_end + 1 denotes an empty range.
    if (layer_start > layer_end + 1) fail("layer_start > layer_end + 1");
    if (layer_end >= num_layers) {
        fail("layer_end " + std::to_string(layer_end) + " >= num_layers " + std::to_string(num_layers));
    }
    if (mode == SmoothMode::Fixed && !(fixed_lambda >= 0.0 && fixed_lambda <= 1.0)) {
        fail("fixed lambda must be in [0,1]");
    }
    if (!(eps >= 0.0) || !std::isfinite(eps)) fail("eps must be >= 0");
}

void to_json(nlohmann::json& j, const SmootherConfig& c) {
    j = nlohmann::json{{"lambda_ref", c.lambda_ref},   {"clip_width", c.clip_width},
                       {"queue_capacity", c.queue_capacity}, {"layer_start", c.layer_start},
                       {"layer_end", c.layer_end},     {"target", c.target},
                       {"mode", c.mode},               {"lambda", c.fixed_lambda},
                       {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, SmootherConfig& c) {
    const SmootherConfig d;
    c.lambda_ref = j.value("lambda_ref", d.lambda_ref);
    c.clip_width = j.value("clip_width", d.clip_width);
    c.queue_capacity = j.value("queue_capacity", d.queue_capacity);
    c.layer_start = j.value("layer_start", d.layer_start);
    c.layer_end = j.value("layer_end", d.layer_end);
    c.target = j.value("target", d.target);
    c.mode = j.value("mode", d.mode);
    c.fixed_lambda = j.value("lambda", d.fixed_lambda);
    c.eps = j.value("eps", d.eps);
}

EntropyQueue::EntropyQueue(std::size_t num_layers, std::size_t capacity)
    : capacity_(capacity), queues_(num_layers) {
    if (capacity < 1) throw Error(Errc::InvalidConfig, "queue capacity must be >= 1");
}

std::size_t EntropyQueue::push_and_rank(std::size_t layer, double z) {
    auto& q = queues_.at(layer);
    if (q.size() == capacity_) q.pop_front();
    q.push_back(z);
    return static_cast<std::size_t>(std::count_if(q.begin(), q.end(), [z](double v) { return v < z; }));
}

void EntropyQueue::clear() {
    for (auto& q : queues_) q.clear();
}

double row_entropy(const AttentionSnapshot& snapshot, double eps) {
    if (snapshot.num_heads == 0 || snapshot.context == 0 ||
        snapshot.probs.size() != snapshot.num_heads * snapshot.context) {
        throw Error(Errc::EmptyInput, "attention snapshot is missing heads");
    }
    double total = 0.0;
    for (std::size_t h = 0; h < snapshot.num_heads; ++h) total += numerics::entropy(snapshot.row(h), eps);
    return total / static_cast<double>(snapshot.num_heads);
}

double adaptive_lambda(std::size_t k, std::size_t capacity) {
    if (capacity == 0 || k >= capacity) {
        throw Error(Errc::InvalidConfig, "rank " + std::to_string(k) + " not below capacity " +
                                             std::to_string(capacity));
    }
    return static_cast<double>(k) / static_cast<double>(capacity);
}

double clip_lambda(double lambda_hat, double lambda_ref, double clip_width) {
    const double windowed = std::max(lambda_ref - clip_width, std::min(lambda_ref + clip_width, lambda_hat));
    return std::clamp(windowed, 0.0, 1.0);
}

namespace {

void blend(std::span<float> current, std::span<const float> previous, double lambda) {
    const double keep = 1.0 - lambda;
    for (std::size_t i = 0; i < current.size(); ++i) {
        current[i] = static_cast<float>(keep * current[i] + lambda * previous[i]);
    }
}

}  // namespace

void smooth_cache_tail(CacheTailView& tail, double lambda, SmoothTarget target) {
    const std::size_t t = tail.position();
    if (t == 0 || target == SmoothTarget::AttnOutput) return;
    for (std::size_t h = 0; h < tail.num_heads(); ++h) {
        blend(tail.key(t, h), tail.read_key(t - 1, h), lambda);
        if (target == SmoothTarget::KeyValue) blend(tail.value(t, h), tail.read_value(t - 1, h), lambda);
    }
}

void smooth_cache_tail(KVCache& cache, std::size_t layer, std::size_t t, double lambda, SmoothTarget target) {
    CacheTailView tail(cache, layer);
    if (tail.position() != t) {
        throw Error(Errc::CacheAccess, "position " + std::to_string(t) + " is not the newest (" +
                                           std::to_string(tail.position()) + ")");
    }
    smooth_cache_tail(tail, lambda, target);
}

EmaSmoother::EmaSmoother(const SmootherConfig& config, const ModelConfig& model)
    : config_(config),
      queue_(model.num_layers, config.queue_capacity),
      prev_output_(model.num_layers, std::vector<float>(model.hidden_dim, 0.0f)),
      has_prev_output_(model.num_layers, false) {
    config_.validate(model.num_layers);
}

void EmaSmoother::begin_sequence(std::size_t /*prompt_length*/) {
    queue_.clear();
    decisions_.clear();
    std::fill(has_prev_output_.begin(), has_prev_output_.end(), false);
}

void EmaSmoother::on_layer(LayerContext& ctx) {
    const std::size_t l = ctx.layer;
    if (l < config_.layer_start || l > config_.layer_end) return;

    SmoothDecision d;
    d.layer = l;
    d.step = ctx.position;
    d.z = row_entropy(ctx.attention, config_.eps);
    if (config_.mode == SmoothMode::Adaptive) {
        const std::size_t k = queue_.push_and_rank(l, d.z);
        d.rank = k;
        d.lambda_hat = adaptive_lambda(k, config_.queue_capacity);
        d.lambda_tilde = clip_lambda(*d.lambda_hat, config_.lambda_ref, config_.clip_width);
    } else {
        d.lambda_tilde = std::clamp(config_.fixed_lambda, 0.0, 1.0);
    }

    if (config_.target == SmoothTarget::AttnOutput) {
        auto& prev = prev_output_[l];
        if (has_prev_output_[l]) blend(ctx.attn_output, prev, d.lambda_tilde);
        std::copy(ctx.attn_output.begin(), ctx.attn_output.end(), prev.begin());
        has_prev_output_[l] = true;
    } else {
        smooth_cache_tail(ctx.cache, d.lambda_tilde, config_.target);
    }
    if (record_) decisions_.push_back(d);
}

std::unique_ptr<EmaSmoother> make_interceptor(const SmootherConfig& config, const ModelConfig& model) {
    return std::make_unique<EmaSmoother>(config, model);
}

double map_objective(const MapOracleInputs& in, double h) {
    const double r_obs = in.observation - h;
    const double r_prior = h - in.previous;
    return -r_obs * r_obs / (2.0 * in.var_obs) - r_prior * r_prior / (2.0 * in.var_prior);
}

MapOracleResult map_oracle(const MapOracleInputs& in) {
    if (!(in.var_obs > 0.0) || !(in.var_prior > 0.0)) {
        throw Error(Errc::InvalidConfig, "variances must be positive");
    }
    const double lambda = in.var_obs / (in.var_prior + in.var_obs);
    MapOracleResult out{0.0, (1.0 - lambda) * in.observation + lambda * in.previous};

    // Left of both anchors the objective rises, right of both it falls, so
    // the maximiser lies between them. Bisect on the sign of the central
    // difference of the objective; for a quadratic the central difference is
    // the exact slope for any step, so the bracket width is used as the step
    // to keep rounding small.
    double lo = std::min(in.observation, in.previous);
    double hi = std::max(in.observation, in.previous);
    const double step = hi - lo;
    if (step == 0.0) {
        out.numeric = lo;
        return out;
    }
    auto slope = [&](double h) { return map_objective(in, h + step) - map_objective(in, h - step); };
    for (int i = 0; i < 200 && hi - lo > 1e-15 * std::max({1.0, std::abs(lo), std::abs(hi)}); ++i) {
        const double mid = 0.5 * (lo + hi);
        if (slope(mid) > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    out.numeric = 0.5 * (lo + hi);
    return out;
}

}  // namespace kvsmooth
