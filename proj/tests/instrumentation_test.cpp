// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "kvsmooth/error.hpp"
#include "kvsmooth/instrumentation.hpp"
#include "kvsmooth/model.hpp"

namespace kvsmooth::instrumentation {
namespace {

Errc code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no kvsmooth::Error thrown";
    return Errc::Io;
}

// Single-head causal history from explicit rows.
std::vector<AttentionSnapshot> history(const std::vector<std::vector<double>>& rows) {
    std::vector<AttentionSnapshot> out;
    for (const auto& r : rows) {
        AttentionSnapshot s;
        s.num_heads = 1;
        s.context = r.size();
        s.probs = r;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<AttentionSnapshot> random_history(std::mt19937_64& rng, std::size_t steps, std::size_t heads) {
    std::uniform_real_distribution<double> u(0.01, 1.0);
    std::vector<AttentionSnapshot> out;
    for (std::size_t t = 0; t < steps; ++t) {
        AttentionSnapshot s;
        s.num_heads = heads;
        s.context = t + 1;
        for (std::size_t h = 0; h < heads; ++h) {
            std::vector<double> row(t + 1);
            for (double& x : row) x = u(rng);
            const double sum = std::accumulate(row.begin(), row.end(), 0.0);
            for (double x : row) s.probs.push_back(x / sum);
        }
        out.push_back(std::move(s));
    }
    return out;
}

// --- column_sums ------------------------------------------------------------

TEST(ColumnSums, UniformThreeStepHistory) {
    const auto h = history({{1.0}, {0.5, 0.5}, {1.0 / 3, 1.0 / 3, 1.0 / 3}});
    const auto s = column_sums(h);
    ASSERT_EQ(s.size(), 3u);
    EXPECT_NEAR(s[0], 0.5 + 1.0 / 3, 1e-12);
    EXPECT_NEAR(s[1], 1.0 / 3, 1e-12);
    EXPECT_DOUBLE_EQ(s[2], 0.0);
}

TEST(ColumnSums, SingleTokenIsZero) {
    EXPECT_EQ(column_sums(history({{1.0}})), std::vector<double>{0.0});
}

TEST(ColumnSums, OneHotSinkCollectsEveryLaterRow) {
    constexpr std::size_t T = 9;
    std::vector<std::vector<double>> rows;
    for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> r(t + 1, 0.0);
        r[0] = 1.0;
        rows.push_back(r);
    }
    const auto s = column_sums(history(rows));
    EXPECT_DOUBLE_EQ(s[0], static_cast<double>(T - 1));
    for (std::size_t j = 1; j < T; ++j) EXPECT_DOUBLE_EQ(s[j], 0.0);
}

TEST(ColumnSums, HeadAveraged) {
    AttentionSnapshot a{0, 2, 1, {1.0, 1.0}};
    AttentionSnapshot b{0, 2, 2, {1.0, 0.0, 0.0, 1.0}};
    const std::vector<AttentionSnapshot> h{a, b};
    EXPECT_DOUBLE_EQ(column_sums(h)[0], 0.5);
}

TEST(ColumnSums, Errors) {
    EXPECT_EQ(code_of([] { column_sums(std::vector<AttentionSnapshot>{}); }), Errc::HistoryNotRetained);
    EXPECT_EQ(code_of([] { column_sums(history({{1.0}, {0.2, 0.3, 0.5}})); }), Errc::LengthMismatch);
    TraceRecord no_history;
    EXPECT_EQ(code_of([&] { column_sums(no_history, 0); }), Errc::HistoryNotRetained);
}

TEST(ColumnSumsProperty, MassIdentityOnRandomCausalHistories) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t T = 1 + rng() % 40;
        const std::size_t H = 1 + rng() % 4;
        const auto h = random_history(rng, T, H);
        const auto s = column_sums(h);
        double expected = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            double self = 0.0;
            for (std::size_t k = 0; k < H; ++k) self += h[t].row(k)[t];
            expected += 1.0 - self / static_cast<double>(H);
        }
        EXPECT_NEAR(std::accumulate(s.begin(), s.end(), 0.0), expected, 1e-6);
        // Brute force per column.
        for (std::size_t j = 0; j < T; ++j) {
            double ref = 0.0;
            for (std::size_t t = j + 1; t < T; ++t)
                for (std::size_t k = 0; k < H; ++k) ref += h[t].row(k)[j];
            EXPECT_NEAR(s[j], ref / static_cast<double>(H), 1e-12);
        }
    }
}

// --- entropy_columnsum_similarity -------------------------------------------

TraceRecord four_token_trace() {
    TraceRecord tr;
    tr.prompt_length = 1;
    tr.num_layers = 1;
    tr.history = {history({{1.0}, {0.5, 0.5}, {0.2, 0.3, 0.5}, {0.1, 0.2, 0.3, 0.4}})};
    const double z[] = {0.0, 1.0, 2.0, 3.0};
    for (std::size_t p = 0; p < 4; ++p) {
        TraceStep s;
        s.position = p;
        s.z = {z[p]};
        s.decisions.resize(1);
        tr.steps.push_back(s);
    }
    return tr;
}

TEST(EntropyColumnSum, HandBuiltFourTokenTrace) {
    // Generated positions 1..3: z = (1,2,3), column sums = (0.3+0.2, 0.3, 0).
    const double dotp = 1.0 * 0.5 + 2.0 * 0.3;
    const double expected = dotp / (std::sqrt(14.0) * std::sqrt(0.25 + 0.09));
    EXPECT_NEAR(entropy_columnsum_similarity(four_token_trace(), 0), expected, 1e-12);
}

TEST(EntropyColumnSum, IdenticalAndNegatedSeries) {
    auto tr = four_token_trace();
    const auto s = column_sums(tr, 0);
    for (auto& st : tr.steps) st.z[0] = s[st.position];
    // Position 3 has a zero column sum, so identical still holds.
    EXPECT_NEAR(entropy_columnsum_similarity(tr, 0), 1.0, 1e-12);
    for (auto& st : tr.steps) st.z[0] = -s[st.position];
    EXPECT_NEAR(entropy_columnsum_similarity(tr, 0), -1.0, 1e-12);
}

TEST(EntropyColumnSum, ZeroSeriesThrows) {
    auto tr = four_token_trace();
    for (auto& st : tr.steps) st.z[0] = 0.0;
    EXPECT_EQ(code_of([&] { entropy_columnsum_similarity(tr, 0); }), Errc::ZeroNorm);
}

// --- stage statistics -------------------------------------------------------

std::vector<std::vector<double>> scalar_series(const std::vector<double>& v) {
    std::vector<std::vector<double>> out;
    for (double x : v) out.push_back({x});
    return out;
}

TEST(Stages, ConstantSeries) {
    const auto st = cumulative_stages(scalar_series(std::vector<double>(37, 2.5)));
    ASSERT_EQ(st.size(), 20u);
    for (const auto& s : st) {
        EXPECT_DOUBLE_EQ(s.mean, 2.5);
        EXPECT_DOUBLE_EQ(s.variance, 0.0);
        EXPECT_DOUBLE_EQ(s.ci95, 0.0);
    }
}

TEST(Stages, FortyStepsTwentyStagesCoverTwoPerStage) {
    std::vector<double> v(40);
    std::iota(v.begin(), v.end(), 0.0);
    const auto st = cumulative_stages(scalar_series(v), 20);
    for (std::size_t s = 1; s <= 20; ++s) {
        EXPECT_EQ(st[s - 1].stage, s);
        EXPECT_EQ(st[s - 1].steps, 2 * s);
        EXPECT_EQ(st[s - 1].count, 2 * s);
    }
}

TEST(Stages, RampMatchesPrefixOracle) {
    std::vector<double> v(10);
    std::iota(v.begin(), v.end(), 1.0);
    const auto st = cumulative_stages(scalar_series(v), 5);
    for (std::size_t s = 1; s <= 5; ++s) {
        const std::size_t n = (s * 10 + 4) / 5;
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += v[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (v[i] - mean) * (v[i] - mean);
        var /= static_cast<double>(n - 1);
        EXPECT_NEAR(st[s - 1].mean, mean, 1e-12);
        EXPECT_NEAR(st[s - 1].variance, var, 1e-12);
        EXPECT_NEAR(st[s - 1].ci95, 1.96 * std::sqrt(var / static_cast<double>(n)), 1e-12);
    }
    EXPECT_DOUBLE_EQ(st[0].mean, 1.5);
    EXPECT_DOUBLE_EQ(st[4].mean, 5.5);
}

TEST(StagesProperty, CountsNonDecreasingAndFinalCoversAll) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t T = 1 + rng() % 70;
        const std::size_t S = 1 + rng() % 25;
        std::vector<std::vector<double>> samples(T);
        std::size_t total = 0;
        for (auto& row : samples) {
            row.resize(rng() % 4);
            total += row.size();
            for (double& x : row) x = static_cast<double>(rng() % 100);
        }
        const auto st = cumulative_stages(samples, S);
        for (std::size_t s = 1; s < st.size(); ++s) {
            EXPECT_GE(st[s].count, st[s - 1].count);
            EXPECT_GE(st[s].steps, st[s - 1].steps);
        }
        EXPECT_EQ(st.back().steps, T);
        EXPECT_EQ(st.back().count, total);
    }
}

TEST(Stages, GroupsPoolTrackedLogits) {
    TraceRecord tr;
    tr.tracked_ids = {7, 9, 11};
    for (std::size_t t = 0; t < 4; ++t) {
        TraceStep s;
        s.position = t;
        const float f = static_cast<float>(t);
        s.tracked_logits = {f, 10.0f + f, -1.0f};
        tr.steps.push_back(s);
    }
    const auto out = stage_statistics(tr, {{ObjectGroup::GtInCaption, {7, 9}}, {ObjectGroup::Hallucinated, {11}}}, 2);
    const auto& in = out.at(ObjectGroup::GtInCaption);
    EXPECT_EQ(in[0].count, 4u);
    EXPECT_DOUBLE_EQ(in[0].mean, (0 + 10 + 1 + 11) / 4.0);
    EXPECT_DOUBLE_EQ(in[1].mean, (0 + 1 + 2 + 3 + 10 + 11 + 12 + 13) / 8.0);
    EXPECT_DOUBLE_EQ(out.at(ObjectGroup::Hallucinated)[1].variance, 0.0);

    EXPECT_EQ(code_of([&] { stage_statistics(tr, {{ObjectGroup::GtOutOfCaption, {}}}); }), Errc::EmptyInput);
    EXPECT_EQ(code_of([&] { stage_statistics(tr, {{ObjectGroup::GtOutOfCaption, {3}}}); }), Errc::Schema);
    EXPECT_EQ(code_of([] { cumulative_stages({}); }), Errc::EmptyInput);
}

// --- entropy_ranking_coupling -----------------------------------------------

TEST(Coupling, IdenticalOrthogonalAndHandPair) {
    auto tr = four_token_trace();
    for (std::size_t p = 0; p < 4; ++p) tr.steps[p].z[0] = p % 2 == 0 ? 1.0 : 0.0;
    const auto out = entropy_ranking_coupling(tr, 0,
                                              {{ObjectGroup::GtInCaption, {1, 0, 1, 0}},
                                               {ObjectGroup::GtOutOfCaption, {0, 1, 0, 1}},
                                               {ObjectGroup::Hallucinated, {1, 1, 1, 0}}});
    EXPECT_NEAR(out.at(ObjectGroup::GtInCaption), 1.0, 1e-12);
    EXPECT_NEAR(out.at(ObjectGroup::GtOutOfCaption), 0.0, 1e-12);
    EXPECT_NEAR(out.at(ObjectGroup::Hallucinated), 2.0 / (std::sqrt(2.0) * std::sqrt(3.0)), 1e-12);
    EXPECT_EQ(code_of([&] { entropy_ranking_coupling(tr, 0, {{ObjectGroup::Hallucinated, {1, 2}}}); }),
              Errc::LengthMismatch);
}

TEST(Labels, ClassifyObject) {
    EXPECT_EQ(classify_object(true, true), ObjectGroup::GtInCaption);
    EXPECT_EQ(classify_object(true, false), ObjectGroup::GtOutOfCaption);
    EXPECT_EQ(classify_object(false, true), ObjectGroup::Hallucinated);
    EXPECT_FALSE(classify_object(false, false).has_value());
}

// --- recorder against a real decode ----------------------------------------

ModelConfig toy_config() {
    ModelConfig c;
    c.num_layers = 4;
    c.num_heads = 4;
    c.head_dim = 16;
    c.hidden_dim = 64;
    c.ffn_dim = 256;
    c.vocab_size = 256;
    c.max_seq_len = 128;
    c.seed = 3;
    return c;
}

TEST(Recorder, OneEntryPerGeneratedTokenWithMergedDecisions) {
    const Model model = init_random(toy_config());
    Decoder dec(model, {});
    SmootherConfig sc;
    sc.layer_start = 1;
    sc.layer_end = 2;
    auto smoother = make_interceptor(sc, model.config);
    TraceRecorder rec({5, 17, 200}, true);
    const std::vector<TokenId> prompt{1, 2, 3, 4, 5};
    const auto result = dec.greedy_decode(prompt, 12, smoother.get(), &rec);
    rec.attach_decisions(smoother->decisions());
    const auto& tr = rec.record();

    ASSERT_EQ(tr.steps.size(), result.generated.size());
    EXPECT_EQ(tr.prompt_length, prompt.size());
    EXPECT_EQ(tr.num_layers, 4u);
    for (std::size_t i = 0; i < tr.steps.size(); ++i) {
        const auto& s = tr.steps[i];
        EXPECT_EQ(s.position, prompt.size() - 1 + i);
        EXPECT_EQ(s.emitted, result.generated[i]);
        if (i > 0) {
            EXPECT_GT(s.position, tr.steps[i - 1].position);
        }
        ASSERT_EQ(s.z.size(), 4u);
        for (double z : s.z) {
            EXPECT_GE(z, -1e-12);
            EXPECT_LE(z, std::log(static_cast<double>(s.position + 1)) + 1e-9);
        }
        EXPECT_EQ(s.tracked_logits.size(), 3u);
        for (std::size_t l = 0; l < 4; ++l) {
            const bool smoothed = l >= 1 && l <= 2 && s.position >= prompt.size();
            EXPECT_EQ(s.decisions[l].has_value(), smoothed) << "step " << i << " layer " << l;
            if (smoothed) EXPECT_NEAR(s.decisions[l]->z, s.z[l], 1e-9);
        }
    }
    ASSERT_EQ(tr.history.size(), 4u);
    EXPECT_EQ(tr.history[0].size(), prompt.size() + result.generated.size() - 1);
    const double cs = entropy_columnsum_similarity(tr, 0);
    EXPECT_GE(cs, -1.0);
    EXPECT_LE(cs, 1.0);
}

TEST(Recorder, RejectsUntrackableIds) {
    const Model model = init_random(toy_config());
    Decoder dec(model, {});
    TraceRecorder rec({999}, false);
    const std::vector<TokenId> prompt{1, 2};
    EXPECT_EQ(code_of([&] { dec.greedy_decode(prompt, 2, nullptr, &rec); }), Errc::InvalidToken);
}

}  // namespace
}  // namespace kvsmooth::instrumentation
