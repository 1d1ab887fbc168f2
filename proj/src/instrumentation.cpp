// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvsmooth/instrumentation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kvsmooth/error.hpp"
#include "kvsmooth/numerics.hpp"

namespace kvsmooth::instrumentation {

TraceRecorder::TraceRecorder(std::vector<TokenId> tracked_ids, bool retain_history, double eps)
    : retain_(retain_history), eps_(eps) {
    record_.tracked_ids = std::move(tracked_ids);
}

void TraceRecorder::on_step(const StepView& step) {
    if (record_.num_layers == 0) record_.num_layers = step.attention.size();
    if (step.prefill) record_.prompt_length = step.position + 1;

    if (retain_) {
        record_.history.resize(step.attention.size());
        for (std::size_t l = 0; l < step.attention.size(); ++l) record_.history[l].push_back(step.attention[l]);
    }
    if (!step.emitted) return;

    TraceStep s;
    s.position = step.position;
    s.input = step.input;
    s.emitted = *step.emitted;
    s.z.reserve(step.attention.size());
    for (const auto& snap : step.attention) s.z.push_back(row_entropy(snap, eps_));
    s.decisions.resize(step.attention.size());
    s.tracked_logits.reserve(record_.tracked_ids.size());
    for (TokenId id : record_.tracked_ids) {
        if (id >= step.logits.size()) throw Error(Errc::InvalidToken, "tracked id " + std::to_string(id));
        s.tracked_logits.push_back(step.logits[id]);
    }
    record_.steps.push_back(std::move(s));
}

void TraceRecorder::attach_decisions(std::span<const SmoothDecision> decisions) {
    auto& steps = record_.steps;
    for (const auto& d : decisions) {
        auto it = std::lower_bound(steps.begin(), steps.end(), d.step,
                                   [](const TraceStep& s, std::size_t pos) { return s.position < pos; });
        if (it == steps.end() || it->position != d.step || d.layer >= it->decisions.size()) continue;
        it->decisions[d.layer] = d;
    }
}

const char* to_string(ObjectGroup g) {
    switch (g) {
        case ObjectGroup::GtInCaption: return "gt_incap";
        case ObjectGroup::GtOutOfCaption: return "gt_outcap";
        case ObjectGroup::Hallucinated: return "hallucinated";
    }
    return "unknown";
}

std::optional<ObjectGroup> classify_object(bool in_ground_truth, bool in_caption) {
    if (in_ground_truth) return in_caption ? ObjectGroup::GtInCaption : ObjectGroup::GtOutOfCaption;
    if (in_caption) return ObjectGroup::Hallucinated;
    return std::nullopt;
}

std::vector<double> column_sums(std::span<const AttentionSnapshot> history) {
    if (history.empty()) throw Error(Errc::HistoryNotRetained, "no attention rows retained");
    const std::size_t n = history.size();
    std::vector<double> score(n, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        const auto& snap = history[t];
        if (snap.context != t + 1 || snap.num_heads == 0 || snap.probs.size() != snap.num_heads * snap.context) {
            throw Error(Errc::LengthMismatch, "history row " + std::to_string(t) + " is not causal");
        }
        for (std::size_t h = 0; h < snap.num_heads; ++h) {
            const auto row = snap.row(h);
            for (std::size_t j = 0; j < t; ++j) score[j] += row[j];
        }
    }
    const double inv_heads = 1.0 / static_cast<double>(history.front().num_heads);
    for (double& s : score) s *= inv_heads;
    return score;
}

std::vector<double> column_sums(const TraceRecord& trace, std::size_t layer) {
    if (!trace.has_history()) throw Error(Errc::HistoryNotRetained, "trace was recorded without history");
    if (layer >= trace.history.size()) throw Error(Errc::LengthMismatch, "layer out of range");
    return column_sums(trace.history[layer]);
}

double entropy_columnsum_similarity(const TraceRecord& trace, std::size_t layer) {
    const auto scores = column_sums(trace, layer);
    std::vector<double> z, cs;
    for (const auto& s : trace.steps) {
        if (s.position < trace.prompt_length || s.position >= scores.size()) continue;
        z.push_back(s.z.at(layer));
        cs.push_back(scores[s.position]);
    }
    return numerics::cosine(z, cs);
}

std::vector<StageStats> cumulative_stages(const std::vector<std::vector<double>>& samples, std::size_t stages) {
    if (samples.empty()) throw Error(Errc::EmptyInput, "no steps to bin");
    if (stages == 0) throw Error(Errc::InvalidConfig, "stage count must be >= 1");
    const std::size_t total = samples.size();
    std::vector<StageStats> out;
    out.reserve(stages);
    // Running sums over the growing prefix; Welford keeps the variance stable.
    std::size_t taken = 0, count = 0;
    double mean = 0.0, m2 = 0.0;
    for (std::size_t s = 1; s <= stages; ++s) {
        const std::size_t end = (s * total + stages - 1) / stages;
        for (; taken < end; ++taken) {
            for (double x : samples[taken]) {
                ++count;
                const double delta = x - mean;
                mean += delta / static_cast<double>(count);
                m2 += delta * (x - mean);
            }
        }
        StageStats st;
        st.stage = s;
        st.steps = end;
        st.count = count;
        st.mean = mean;
        st.variance = count > 1 ? m2 / static_cast<double>(count - 1) : 0.0;
        st.ci95 = count > 0 ? 1.96 * std::sqrt(st.variance) / std::sqrt(static_cast<double>(count)) : 0.0;
        out.push_back(st);
    }
    return out;
}

std::map<ObjectGroup, std::vector<StageStats>> stage_statistics(
    const TraceRecord& trace, const std::map<ObjectGroup, std::vector<TokenId>>& groups, std::size_t stages) {
    std::map<ObjectGroup, std::vector<StageStats>> out;
    for (const auto& [group, ids] : groups) {
        if (ids.empty()) throw Error(Errc::EmptyInput, std::string("object group ") + to_string(group) + " is empty");
        std::vector<std::size_t> columns;
        for (TokenId id : ids) {
            const auto it = std::find(trace.tracked_ids.begin(), trace.tracked_ids.end(), id);
            if (it == trace.tracked_ids.end()) throw Error(Errc::Schema, "token " + std::to_string(id) + " was not tracked");
            columns.push_back(static_cast<std::size_t>(it - trace.tracked_ids.begin()));
        }
        std::vector<std::vector<double>> samples;
        samples.reserve(trace.steps.size());
        for (const auto& step : trace.steps) {
            std::vector<double> row;
            for (std::size_t c : columns) row.push_back(step.tracked_logits.at(c));
            samples.push_back(std::move(row));
        }
        out[group] = cumulative_stages(samples, stages);
    }
    return out;
}

std::map<ObjectGroup, double> entropy_ranking_coupling(const TraceRecord& trace, std::size_t layer,
                                                       const std::map<ObjectGroup, std::vector<double>>& ranking) {
    std::vector<double> z;
    z.reserve(trace.steps.size());
    for (const auto& s : trace.steps) z.push_back(s.z.at(layer));
    std::map<ObjectGroup, double> out;
    for (const auto& [group, series] : ranking) {
        if (series.size() != z.size()) {
            throw Error(Errc::LengthMismatch, std::string("ranking series for ") + to_string(group) + " has " +
                                                  std::to_string(series.size()) + " values, trace has " +
                                                  std::to_string(z.size()) + " steps");
        }
        out[group] = numerics::cosine(z, series);
    }
    return out;
}

}  // namespace kvsmooth::instrumentation
