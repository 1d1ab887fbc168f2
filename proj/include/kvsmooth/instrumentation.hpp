// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "kvsmooth/decoder.hpp"
#include "kvsmooth/smoother.hpp"

namespace kvsmooth::instrumentation {

// One entry per generated token: the forward pass at `position` whose logits
// emitted `emitted`.
struct TraceStep {
    std::size_t position = 0;
    TokenId input = 0;
    TokenId emitted = 0;
    std::vector<double> z;  // head-averaged row entropy per layer
    std::vector<std::optional<SmoothDecision>> decisions;  // per layer
    std::vector<float> tracked_logits;  // aligned with TraceRecord::tracked_ids
};

struct TraceRecord {
    std::size_t prompt_length = 0;
    std::size_t num_layers = 0;
    std::vector<TokenId> tracked_ids;
    std::vector<TraceStep> steps;
    // history[layer][position], present only when retention was requested.
    std::vector<std::vector<AttentionSnapshot>> history;

    bool has_history() const { return !history.empty(); }
};

// Collects a TraceRecord from decoder callbacks. Retaining the full attention
// history costs O(T^2 * H) memory per layer and is off by default.
class TraceRecorder final : public StepObserver {
public:
    TraceRecorder(std::vector<TokenId> tracked_ids, bool retain_history,
                  double eps = numerics::kDefaultEntropyEps);

    void on_step(const StepView& step) override;
    // Files each decision under the step whose pass smoothed that position.
    void attach_decisions(std::span<const SmoothDecision> decisions);

    const TraceRecord& record() const noexcept { return record_; }
    TraceRecord take() { return std::move(record_); }

private:
    TraceRecord record_;
    bool retain_;
    double eps_;
};

enum class ObjectGroup { GtInCaption, GtOutOfCaption, Hallucinated };

const char* to_string(ObjectGroup g);

// GT and mentioned -> GtInCaption; GT only -> GtOutOfCaption; mentioned only
// -> Hallucinated; neither -> nullopt.
std::optional<ObjectGroup> classify_object(bool in_ground_truth, bool in_caption);

// Head-averaged attention each token receives from strictly later queries:
//   score_j = (1/H) sum_h sum_{t>j} alpha_{t,j}
// history[t] is the row snapshot of query t (context t + 1). Throws
// Error{HistoryNotRetained} for an empty history, Error{LengthMismatch} for
// a non-causal layout.
std::vector<double> column_sums(std::span<const AttentionSnapshot> history);
std::vector<double> column_sums(const TraceRecord& trace, std::size_t layer);

// Cosine between each generated query's own row entropy and its column sum,
// over positions at or after the prompt.
double entropy_columnsum_similarity(const TraceRecord& trace, std::size_t layer);

struct StageStats {
    std::size_t stage = 0;     // 1-based
    std::size_t steps = 0;     // prefix length ceil(stage * T / S)
    std::size_t count = 0;     // pooled samples
    double mean = 0.0;
    double variance = 0.0;     // unbiased; 0 for a single sample
    double ci95 = 0.0;         // 1.96 * sd / sqrt(count)
};

// Cumulative-prefix binning: stage s pools every sample of steps
// 1..ceil(s*T/S). samples[t] holds the values observed at step t.
std::vector<StageStats> cumulative_stages(const std::vector<std::vector<double>>& samples, std::size_t stages = 20);

// Tracked-logit stage statistics per object group. Throws Error{EmptyInput}
// for an empty group and Error{Schema} for ids that were not tracked.
std::map<ObjectGroup, std::vector<StageStats>> stage_statistics(
    const TraceRecord& trace, const std::map<ObjectGroup, std::vector<TokenId>>& groups, std::size_t stages = 20);

// Cosine between the per-step row entropy at `layer` and a caller-supplied
// ranking series for each group. Throws Error{LengthMismatch} when a series
// is not one value per step.
std::map<ObjectGroup, double> entropy_ranking_coupling(const TraceRecord& trace, std::size_t layer,
                                                       const std::map<ObjectGroup, std::vector<double>>& ranking);

}  // namespace kvsmooth::instrumentation
