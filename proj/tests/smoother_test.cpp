// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "kvsmooth/error.hpp"
#include "kvsmooth/smoother.hpp"

namespace kvsmooth {
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

AttentionSnapshot snapshot(std::vector<std::vector<double>> rows) {
    AttentionSnapshot s;
    s.num_heads = rows.size();
    s.context = rows.empty() ? 0 : rows[0].size();
    for (const auto& r : rows) s.probs.insert(s.probs.end(), r.begin(), r.end());
    return s;
}

ModelConfig scalar_cache_config(std::size_t len) {
    ModelConfig c;
    c.num_layers = 1;
    c.num_heads = 1;
    c.head_dim = 1;
    c.hidden_dim = 1;
    c.max_seq_len = len;
    return c;
}

ModelConfig toy_config(std::uint64_t seed) {
    ModelConfig c;
    c.num_layers = 4;
    c.num_heads = 4;
    c.head_dim = 16;
    c.hidden_dim = 64;
    c.ffn_dim = 256;
    c.vocab_size = 256;
    c.max_seq_len = 128;
    c.seed = seed;
    return c;
}

// --- row_entropy ------------------------------------------------------------

TEST(RowEntropy, UniformHeads) {
    const std::vector<double> u(4, 0.25);
    EXPECT_NEAR(row_entropy(snapshot({u, u}), 0.0), std::log(4.0), 1e-12);
}

TEST(RowEntropy, OneHotAndUniformAverage) {
    const auto s = snapshot({{1.0, 0.0, 0.0, 0.0}, std::vector<double>(4, 0.25)});
    EXPECT_NEAR(row_entropy(s, 1e-10), 0.6931471805599453, 1e-9);
}

TEST(RowEntropy, MissingHeads) {
    AttentionSnapshot s;
    EXPECT_EQ(code_of([&] { row_entropy(s); }), Errc::EmptyInput);
    s = snapshot({{0.5, 0.5}, {0.5, 0.5}});
    s.probs.pop_back();
    EXPECT_EQ(code_of([&] { row_entropy(s); }), Errc::EmptyInput);
}

// --- queue / rank -------------------------------------------------------------

TEST(EntropyQueue, RankCountsStrictlySmaller) {
    EntropyQueue q(1, 4);
    for (double z : {0.5, 1.2, 0.9}) q.push_and_rank(0, z);
    EXPECT_EQ(q.push_and_rank(0, 1.0), 2u);
    EXPECT_EQ(std::vector<double>(q.values(0).begin(), q.values(0).end()),
              (std::vector<double>{0.5, 1.2, 0.9, 1.0}));
}

TEST(EntropyQueue, EmptyQueueRanksZero) {
    EntropyQueue q(2, 15);
    EXPECT_EQ(q.push_and_rank(1, 3.0), 0u);
}

TEST(EntropyQueue, EvictsOldestFirst) {
    EntropyQueue q(1, 3);
    for (double z : {1.0, 2.0, 3.0, 4.0}) q.push_and_rank(0, z);
    EXPECT_EQ(std::vector<double>(q.values(0).begin(), q.values(0).end()), (std::vector<double>{2.0, 3.0, 4.0}));
}

TEST(EntropyQueue, TiesAreNotSmaller) {
    EntropyQueue q(1, 5);
    for (int i = 0; i < 8; ++i) EXPECT_EQ(q.push_and_rank(0, 1.25), 0u);
}

TEST(EntropyQueue, PropertyRankMatchesBruteForce) {
    std::mt19937_64 rng(1234);
    std::uniform_int_distribution<int> pushes(1, 40);
    std::uniform_int_distribution<int> coarse(0, 6);  // many ties
    std::uniform_real_distribution<double> fine(0.0, 5.0);
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t m = 15;
        EntropyQueue q(1, m);
        std::vector<double> history;
        const int n = pushes(rng);
        for (int i = 0; i < n; ++i) {
            const double z = (trial % 2 == 0) ? coarse(rng) * 0.5 : fine(rng);
            history.push_back(z);
            const std::size_t k = q.push_and_rank(0, z);
            const std::size_t first = history.size() > m ? history.size() - m : 0;
            std::size_t brute = 0;
            for (std::size_t a = first; a < history.size(); ++a) {
                brute += history[a] < z ? 1 : 0;
            }
            ASSERT_EQ(k, brute) << "trial " << trial << " push " << i;
            ASSERT_LE(k, m - 1);
        }
        // After M + j pushes the queue holds exactly the last M values in order.
        const std::size_t first = history.size() > m ? history.size() - m : 0;
        ASSERT_TRUE(std::equal(q.values(0).begin(), q.values(0).end(), history.begin() + static_cast<long>(first),
                               history.end()));
    }
}

// --- coefficients ---------------------------------------------------------

TEST(AdaptiveLambda, Formula) {
    EXPECT_DOUBLE_EQ(adaptive_lambda(2, 4), 0.5);
    EXPECT_DOUBLE_EQ(adaptive_lambda(0, 15), 0.0);
    EXPECT_NEAR(adaptive_lambda(14, 15), 14.0 / 15.0, 1e-15);
    EXPECT_NEAR(adaptive_lambda(14, 15), 0.9333, 1e-4);
    EXPECT_EQ(code_of([] { adaptive_lambda(15, 15); }), Errc::InvalidConfig);
}

TEST(ClipLambda, Window) {
    EXPECT_NEAR(clip_lambda(0.5, 0.9, 0.2), 0.7, 1e-15);
    EXPECT_NEAR(clip_lambda(0.6, 0.5, 0.2), 0.6, 1e-15);
    EXPECT_NEAR(clip_lambda(0.9333, 0.7, 0.2), 0.9, 1e-15);
    // Window [0.9, 1.1] is cut at 1.
    EXPECT_DOUBLE_EQ(clip_lambda(1.05, 1.0, 0.2), 1.0);
    EXPECT_DOUBLE_EQ(clip_lambda(0.0, 0.1, 0.2), 0.0);
}

// --- cache EMA -----------------------------------------------------------

TEST(SmoothCacheTail, Midpoint) {
    KVCache cache(scalar_cache_config(4));
    const std::vector<float> zero{0.0f}, two{2.0f};
    cache.stage(0, zero, zero);
    cache.commit();
    cache.stage(0, two, two);
    smooth_cache_tail(cache, 0, 1, 0.5, SmoothTarget::KeyValue);
    EXPECT_FLOAT_EQ(cache.key(0, 1, 0)[0], 1.0f);
    EXPECT_FLOAT_EQ(cache.value(0, 1, 0)[0], 1.0f);
}

TEST(SmoothCacheTail, ZeroLambdaIsIdentity) {
    KVCache cache(scalar_cache_config(4));
    const std::vector<float> a{0.37f}, b{-1.91f};
    cache.stage(0, a, a);
    cache.commit();
    cache.stage(0, b, b);
    smooth_cache_tail(cache, 0, 1, 0.0, SmoothTarget::KeyValue);
    EXPECT_EQ(cache.key(0, 1, 0)[0], b[0]);
    EXPECT_EQ(cache.value(0, 1, 0)[0], b[0]);
}

TEST(SmoothCacheTail, KeyOnlyLeavesValues) {
    KVCache cache(scalar_cache_config(4));
    const std::vector<float> zero{0.0f}, two{2.0f};
    cache.stage(0, zero, zero);
    cache.commit();
    cache.stage(0, two, two);
    smooth_cache_tail(cache, 0, 1, 0.5, SmoothTarget::KeyOnly);
    EXPECT_FLOAT_EQ(cache.key(0, 1, 0)[0], 1.0f);
    EXPECT_FLOAT_EQ(cache.value(0, 1, 0)[0], 2.0f);
}

TEST(SmoothCacheTail, FirstPositionIsNoOp) {
    KVCache cache(scalar_cache_config(4));
    const std::vector<float> a{3.0f};
    cache.stage(0, a, a);
    smooth_cache_tail(cache, 0, 0, 0.9, SmoothTarget::KeyValue);
    EXPECT_EQ(cache.key(0, 0, 0)[0], 3.0f);
}

TEST(SmoothCacheTail, RejectsNonTailPosition) {
    KVCache cache(scalar_cache_config(4));
    const std::vector<float> a{3.0f};
    cache.stage(0, a, a);
    cache.commit();
    cache.stage(0, a, a);
    EXPECT_EQ(code_of([&] { smooth_cache_tail(cache, 0, 0, 0.5, SmoothTarget::KeyValue); }), Errc::CacheAccess);
}

TEST(SmoothCacheTail, RecursiveEmaByHand) {
    // Raw keys 1, 2, 4 with lambda 0.5: 1, 1.5, 2.75.
    KVCache cache(scalar_cache_config(4));
    for (float raw : {1.0f, 2.0f, 4.0f}) {
        const std::vector<float> k{raw};
        cache.stage(0, k, k);
        smooth_cache_tail(cache, 0, cache.length(), 0.5, SmoothTarget::KeyValue);
        cache.commit();
    }
    EXPECT_FLOAT_EQ(cache.key(0, 1, 0)[0], 1.5f);
    EXPECT_FLOAT_EQ(cache.key(0, 2, 0)[0], 2.75f);
}

TEST(SmoothCacheTail, PropertyMatchesUnrolledSum) {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> val(-3.0, 3.0);
    for (double lambda : {0.3, 0.5, 0.9}) {
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t steps = 64;
            KVCache cache(scalar_cache_config(steps));
            std::vector<double> raw(steps);
            for (std::size_t t = 0; t < steps; ++t) {
                raw[t] = static_cast<float>(val(rng));
                const std::vector<float> k{static_cast<float>(raw[t])};
                cache.stage(0, k, k);
                smooth_cache_tail(cache, 0, t, lambda, SmoothTarget::KeyValue);
                cache.commit();
            }
            for (std::size_t t = 1; t < steps; ++t) {
                double expect = std::pow(lambda, static_cast<double>(t)) * raw[0];
                for (std::size_t i = 1; i <= t; ++i) {
                    expect += (1.0 - lambda) * std::pow(lambda, static_cast<double>(t - i)) * raw[i];
                }
                ASSERT_NEAR(cache.key(0, t, 0)[0], expect, 1e-5) << "lambda " << lambda << " t " << t;
            }
        }
    }
}

// --- interceptor ---------------------------------------------------------

TEST(SmootherConfig, Validation) {
    SmootherConfig c;
    c.layer_start = 0;
    c.layer_end = 3;
    EXPECT_NO_THROW(c.validate(4));
    EXPECT_EQ(code_of([&] { c.validate(3); }), Errc::InvalidConfig);
    c.lambda_ref = 1.2;
    EXPECT_EQ(code_of([&] { c.validate(4); }), Errc::InvalidConfig);
    c = SmootherConfig{};
    c.layer_end = 1;
    c.queue_capacity = 0;
    EXPECT_EQ(code_of([&] { c.validate(4); }), Errc::InvalidConfig);
    c = SmootherConfig{};
    c.layer_start = 2;
    c.layer_end = 0;
    EXPECT_EQ(code_of([&] { c.validate(4); }), Errc::InvalidConfig);
    c.layer_start = 1;  // empty range
    EXPECT_NO_THROW(c.validate(4));
}

TEST(EmaSmoother, ConstantEntropyGivesZeroLambdaHat) {
    ModelConfig mc = toy_config(1);
    SmootherConfig sc;
    sc.layer_start = 0;
    sc.layer_end = 0;
    sc.queue_capacity = 4;
    sc.lambda_ref = 0.5;
    EmaSmoother smoother(sc, mc);
    smoother.begin_sequence(1);
    KVCache cache(mc);
    std::vector<float> kv(mc.hidden_dim, 1.0f), out(mc.hidden_dim, 0.0f);
    for (std::size_t t = 0; t < 10; ++t) {
        for (std::size_t l = 0; l < mc.num_layers; ++l) cache.stage(l, kv, kv);
        std::vector<std::vector<double>> rows(mc.num_heads, std::vector<double>(t + 1, 1.0 / double(t + 1)));
        // Same entropy every step: a two-point uniform row padded with zeros.
        for (auto& r : rows) {
            std::fill(r.begin(), r.end(), 0.0);
            r[0] = 1.0;
        }
        const auto snap = snapshot(rows);
        LayerContext ctx{0, t, snap, CacheTailView(cache, 0), out};
        smoother.on_layer(ctx);
        cache.commit();
    }
    ASSERT_EQ(smoother.decisions().size(), 10u);
    for (const auto& d : smoother.decisions()) {
        EXPECT_EQ(*d.rank, 0u);
        EXPECT_EQ(*d.lambda_hat, 0.0);
        EXPECT_NEAR(d.lambda_tilde, 0.3, 1e-15);
    }
}

std::vector<TokenId> random_prompt(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
    std::uniform_int_distribution<std::size_t> tok(0, vocab - 1);
    std::vector<TokenId> p(n);
    for (auto& t : p) t = static_cast<TokenId>(tok(rng));
    return p;
}

TEST(EmaSmoother, FixedZeroAndEmptyRangeMatchBaseline) {
    std::mt19937_64 rng(5);
    for (std::uint64_t seed : {1u, 2u}) {
        const auto m = init_random(toy_config(seed));
        const auto prompt = random_prompt(rng, 8, 256);
        const auto base = Decoder(m).greedy_decode(prompt, 40);

        SmootherConfig fixed0;
        fixed0.mode = SmoothMode::Fixed;
        fixed0.fixed_lambda = 0.0;
        fixed0.layer_start = 0;
        fixed0.layer_end = 3;
        auto hook = make_interceptor(fixed0, m.config);
        EXPECT_EQ(Decoder(m).greedy_decode(prompt, 40, hook.get()).generated, base.generated);
        EXPECT_FALSE(hook->decisions().empty());

        SmootherConfig none;
        none.layer_start = 4;
        none.layer_end = 3;
        auto idle = make_interceptor(none, m.config);
        EXPECT_EQ(Decoder(m).greedy_decode(prompt, 40, idle.get()).generated, base.generated);
        EXPECT_TRUE(idle->decisions().empty());
    }
}

// Checks the contraction identity around every smoothing call.
struct ContractionCheck : StepInterceptor {
    explicit ContractionCheck(EmaSmoother& inner) : inner(inner) {}
    void begin_sequence(std::size_t n) override { inner.begin_sequence(n); }
    void on_layer(LayerContext& ctx) override {
        const std::size_t t = ctx.cache.position();
        std::vector<std::vector<float>> raw, prev;
        for (std::size_t h = 0; h < ctx.cache.num_heads(); ++h) {
            raw.emplace_back(ctx.cache.read_key(t, h).begin(), ctx.cache.read_key(t, h).end());
            if (t > 0) prev.emplace_back(ctx.cache.read_key(t - 1, h).begin(), ctx.cache.read_key(t - 1, h).end());
        }
        const std::size_t before = inner.decisions().size();
        inner.on_layer(ctx);
        if (inner.decisions().size() == before || t == 0) return;
        const double lambda = inner.decisions().back().lambda_tilde;
        for (std::size_t h = 0; h < raw.size(); ++h) {
            double lhs = 0.0, rhs = 0.0;
            const auto smoothed = ctx.cache.read_key(t, h);
            for (std::size_t i = 0; i < raw[h].size(); ++i) {
                lhs += std::pow(double(smoothed[i]) - prev[h][i], 2);
                rhs += std::pow(double(raw[h][i]) - prev[h][i], 2);
            }
            worst = std::max(worst, std::abs(std::sqrt(lhs) - (1.0 - lambda) * std::sqrt(rhs)));
            ++checked;
        }
    }
    EmaSmoother& inner;
    double worst = 0.0;
    std::size_t checked = 0;
};

TEST(EmaSmoother, ContractionIdentityHoldsOnEverySmoothedStep) {
    const auto m = init_random(toy_config(9));
    SmootherConfig sc;
    sc.layer_start = 1;
    sc.layer_end = 3;
    sc.lambda_ref = 0.7;
    EmaSmoother smoother(sc, m.config);
    ContractionCheck check(smoother);
    std::mt19937_64 rng(1);
    Decoder(m).greedy_decode(random_prompt(rng, 8, 256), 64, &check);
    EXPECT_GT(check.checked, 0u);
    EXPECT_LE(check.worst, 1e-6);
}

TEST(EmaSmoother, RecordedCoefficientsStayInRange) {
    const auto m = init_random(toy_config(10));
    std::mt19937_64 rng(2);
    const auto prompt = random_prompt(rng, 12, 256);
    for (double ref : {0.3, 0.5, 0.7, 0.9}) {
        SmootherConfig sc;
        sc.layer_start = 0;
        sc.layer_end = 3;
        sc.lambda_ref = ref;
        auto hook = make_interceptor(sc, m.config);
        Decoder(m).greedy_decode(prompt, 64, hook.get());
        ASSERT_EQ(hook->decisions().size(), 63u * 4u);
        for (const auto& d : hook->decisions()) {
            ASSERT_GE(*d.lambda_hat, 0.0);
            ASSERT_LE(*d.lambda_hat, 14.0 / 15.0 + 1e-15);
            ASSERT_GE(d.lambda_tilde, std::max(0.0, ref - 0.2) - 1e-12);
            ASSERT_LE(d.lambda_tilde, std::min(1.0, ref + 0.2) + 1e-12);
            ASSERT_GE(d.z, 0.0);
            ASSERT_LE(d.z, std::log(double(d.step + 1)) + 1e-9);
        }
    }
}

TEST(EmaSmoother, StrongFixedSmoothingReducesKeyMotion) {
    const auto m = init_random(toy_config(12));
    std::mt19937_64 rng(3);
    const auto prompt = random_prompt(rng, 8, 256);
    auto mean_key_step = [&](double lambda) {
        SmootherConfig sc;
        sc.mode = SmoothMode::Fixed;
        sc.fixed_lambda = lambda;
        sc.layer_start = 0;
        sc.layer_end = 3;
        auto hook = make_interceptor(sc, m.config);
        KVCache cache(m.config);
        Decoder(m).greedy_decode(cache, prompt, 64, hook.get());
        double total = 0.0;
        std::size_t n = 0;
        for (std::size_t l = 0; l < 4; ++l) {
            for (std::size_t t = prompt.size() + 1; t < cache.length(); ++t) {
                for (std::size_t h = 0; h < 4; ++h) {
                    double ss = 0.0;
                    for (std::size_t i = 0; i < 16; ++i) {
                        ss += std::pow(double(cache.key(l, t, h)[i]) - cache.key(l, t - 1, h)[i], 2);
                    }
                    total += std::sqrt(ss);
                    ++n;
                }
            }
        }
        return total / double(n);
    };
    EXPECT_LT(mean_key_step(0.9), mean_key_step(0.0));
}

// Verifies the wrapped smoother never writes the cache tail.
struct TailWriteGuard : StepInterceptor {
    explicit TailWriteGuard(EmaSmoother& inner) : inner(inner) {}
    void begin_sequence(std::size_t n) override { inner.begin_sequence(n); }
    void on_layer(LayerContext& ctx) override {
        const std::size_t t = ctx.cache.position();
        std::vector<float> before;
        for (std::size_t h = 0; h < ctx.cache.num_heads(); ++h) {
            before.insert(before.end(), ctx.cache.read_key(t, h).begin(), ctx.cache.read_key(t, h).end());
            before.insert(before.end(), ctx.cache.read_value(t, h).begin(), ctx.cache.read_value(t, h).end());
        }
        const std::vector<float> out_before(ctx.attn_output.begin(), ctx.attn_output.end());
        inner.on_layer(ctx);
        std::vector<float> after;
        for (std::size_t h = 0; h < ctx.cache.num_heads(); ++h) {
            after.insert(after.end(), ctx.cache.read_key(t, h).begin(), ctx.cache.read_key(t, h).end());
            after.insert(after.end(), ctx.cache.read_value(t, h).begin(), ctx.cache.read_value(t, h).end());
        }
        cache_writes += before != after ? 1 : 0;
        output_changes += std::equal(out_before.begin(), out_before.end(), ctx.attn_output.begin()) ? 0 : 1;
    }
    EmaSmoother& inner;
    std::size_t cache_writes = 0;
    std::size_t output_changes = 0;
};

TEST(EmaSmoother, AttnOutputTargetBlendsOutputsNotCache) {
    const auto m = init_random(toy_config(13));
    std::mt19937_64 rng(4);
    const auto prompt = random_prompt(rng, 6, 256);
    SmootherConfig sc;
    sc.target = SmoothTarget::AttnOutput;
    sc.mode = SmoothMode::Fixed;
    sc.fixed_lambda = 0.8;
    sc.layer_start = 0;
    sc.layer_end = 3;
    EmaSmoother smoother(sc, m.config);
    TailWriteGuard guard(smoother);
    const auto base = Decoder(m).greedy_decode(prompt, 20);
    const auto smoothed = Decoder(m).greedy_decode(prompt, 20, &guard);
    EXPECT_EQ(guard.cache_writes, 0u);
    // Every in-range call except each layer's first blends the output.
    EXPECT_EQ(guard.output_changes, 18u * 4u);
    EXPECT_NE(base.generated, smoothed.generated);
}

// --- MAP oracle ------------------------------------------------------------

TEST(MapOracle, EqualVariancesGiveMidpoint) {
    const auto r = map_oracle({2.0, 0.0, 1.0, 1.0});
    EXPECT_NEAR(r.numeric, 1.0, 1e-10);
    EXPECT_NEAR(r.closed_form, 1.0, 1e-15);
}

TEST(MapOracle, PerfectObservationLimit) {
    const auto r = map_oracle({2.0, -3.0, 1e-12, 1.0});
    EXPECT_NEAR(r.numeric, 2.0, 1e-9);
    EXPECT_NEAR(r.closed_form, 2.0, 1e-9);
}

TEST(MapOracle, RejectsNonPositiveVariance) {
    EXPECT_EQ(code_of([] { map_oracle({1.0, 0.0, 0.0, 1.0}); }), Errc::InvalidConfig);
    EXPECT_EQ(code_of([] { map_oracle({1.0, 0.0, 1.0, -1.0}); }), Errc::InvalidConfig);
}

TEST(MapOracle, PropertyNumericMatchesClosedForm) {
    std::mt19937_64 rng(2718);
    std::uniform_real_distribution<double> pos(-10.0, 10.0);
    std::uniform_real_distribution<double> logvar(-4.0, 2.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const MapOracleInputs in{pos(rng), pos(rng), std::pow(10.0, logvar(rng)), std::pow(10.0, logvar(rng))};
        const auto r = map_oracle(in);
        ASSERT_NEAR(r.numeric, r.closed_form, 1e-6) << "trial " << trial;
        // The numeric maximiser is no worse than nearby points.
        ASSERT_GE(map_objective(in, r.numeric), map_objective(in, r.numeric + 1e-4));
        ASSERT_GE(map_objective(in, r.numeric), map_objective(in, r.numeric - 1e-4));
    }
}

}  // namespace
}  // namespace kvsmooth
