// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvsmooth/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <functional>
#include <ostream>
#include <random>
#include <sstream>

#include "kvsmooth/decoder.hpp"
#include "kvsmooth/kv_cache.hpp"
#include "kvsmooth/model.hpp"
#include "kvsmooth/smoother.hpp"

namespace kvsmooth::verify {
namespace {

// Outcome of one suite body: empty `failure` means pass.
struct Outcome {
    std::string summary;
    std::string failure;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
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

std::vector<TokenId> random_prompt(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
    std::vector<TokenId> p(n);
    for (auto& t : p) t = static_cast<TokenId>(rng() % vocab);
    return p;
}

Outcome map_oracle_suite(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> state(-10.0, 10.0);
    std::uniform_real_distribution<double> log_var(std::log(1e-2), std::log(1e2));
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const MapOracleInputs in{state(rng), state(rng), std::exp(log_var(rng)), std::exp(log_var(rng))};
        const auto r = map_oracle(in);
        const double dev = std::abs(r.numeric - r.closed_form);
        worst = std::max(worst, dev);
        if (dev > 1e-6) {
            return {"", "numeric maximiser differs from the EMA closed form by " + fmt("%.3e", dev) + " at draw " +
                            std::to_string(i)};
        }
    }
    return {"1000 draws, max deviation " + fmt("%.3e", worst), ""};
}

Outcome queue_rank_suite(std::uint64_t seed, bool inject_fault) {
    constexpr std::size_t M = 15;
    std::mt19937_64 rng(seed);
    for (int trial = 0; trial < 10000; ++trial) {
        EntropyQueue queue(1, M);
        std::deque<double> ref;
        const std::size_t pushes = 1 + rng() % (3 * M);
        const bool coarse = rng() % 2 == 0;  // coarse values force ties
        for (std::size_t p = 0; p < pushes; ++p) {
            const double z = coarse ? static_cast<double>(rng() % 5) : std::ldexp(static_cast<double>(rng() >> 11), -53);
            std::size_t got = queue.push_and_rank(0, z);
            if (inject_fault) ++got;
            ref.push_back(z);
            if (ref.size() > M) ref.pop_front();
            std::size_t want = 0;
            for (double v : ref) want += v < z ? 1 : 0;
            if (got != want) {
                return {"", "rank " + std::to_string(got) + " != brute force " + std::to_string(want) + " (trial " +
                                std::to_string(trial) + ", push " + std::to_string(p) + ")"};
            }
            const auto& held = queue.values(0);
            if (!std::equal(held.begin(), held.end(), ref.begin(), ref.end())) {
                return {"", "queue contents diverge from FIFO reference (trial " + std::to_string(trial) + ")"};
            }
        }
    }
    return {"10000 random queues, M=15", ""};
}

Outcome ema_closed_form_suite(std::uint64_t seed) {
    constexpr std::size_t T = 64;
    ModelConfig c;
    c.num_layers = 1;
    c.num_heads = 1;
    c.head_dim = 1;
    c.hidden_dim = 1;
    c.max_seq_len = T;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> obs(0.0, 1.0);
    double worst = 0.0;
    for (double lambda : {0.3, 0.5, 0.9}) {
        for (int trial = 0; trial < 100; ++trial) {
            KVCache cache(c);
            std::vector<double> raw;
            for (std::size_t t = 0; t < T; ++t) {
                const float k = static_cast<float>(obs(rng));
                raw.push_back(k);
                const float kv[1] = {k};
                cache.stage(0, kv, kv);
                cache.commit();
                smooth_cache_tail(cache, 0, t, lambda, SmoothTarget::KeyValue);
                // Unrolled: lambda^t k_0 + (1 - lambda) sum_{i=1..t} lambda^(t-i) k_i
                double want = std::pow(lambda, static_cast<double>(t)) * raw[0];
                for (std::size_t i = 1; i <= t; ++i) {
                    want += (1.0 - lambda) * std::pow(lambda, static_cast<double>(t - i)) * raw[i];
                }
                const double dev = std::abs(cache.key(0, t, 0)[0] - want);
                worst = std::max(worst, dev);
                if (dev > 1e-5) {
                    return {"", "cached key deviates from unrolled EMA by " + fmt("%.3e", dev) + " (lambda " +
                                    fmt("%.1f", lambda) + ", trial " + std::to_string(trial) + ")"};
                }
            }
        }
    }
    return {"3 lambdas x 100 trajectories x 64 steps, max deviation " + fmt("%.3e", worst), ""};
}

struct LogitTap : StepObserver {
    void on_step(const StepView& s) override { logits.emplace_back(s.logits.begin(), s.logits.end()); }
    std::vector<std::vector<float>> logits;
};

Outcome lambda_zero_suite(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (std::uint64_t cfg = 0; cfg < 3; ++cfg) {
        const Model m = init_random(toy_config(seed + cfg));
        SmootherConfig sc;
        sc.mode = SmoothMode::Fixed;
        sc.fixed_lambda = 0.0;
        sc.layer_start = 0;
        sc.layer_end = m.config.num_layers - 1;
        for (int p = 0; p < 4; ++p) {
            const auto prompt = random_prompt(rng, 4 + rng() % 8, m.config.vocab_size);
            LogitTap base_tap, smooth_tap;
            const auto base = Decoder(m).greedy_decode(prompt, 24, nullptr, &base_tap);
            auto hook = make_interceptor(sc, m.config);
            const auto smoothed = Decoder(m).greedy_decode(prompt, 24, hook.get(), &smooth_tap);
            if (base.generated != smoothed.generated) {
                return {"", "Fixed(0) changed the generated tokens (config " + std::to_string(cfg) + ", prompt " +
                                std::to_string(p) + ")"};
            }
            for (std::size_t s = 0; s < base_tap.logits.size(); ++s) {
                for (std::size_t v = 0; v < base_tap.logits[s].size(); ++v) {
                    const double a = base_tap.logits[s][v], b = smooth_tap.logits[s][v];
                    const double rel = std::abs(a - b) / std::max(1e-30, std::abs(a));
                    worst = std::max(worst, rel);
                    if (rel > 1e-6) return {"", "Fixed(0) logit relative deviation " + fmt("%.3e", rel)};
                }
            }
        }
    }
    return {"3 configs x 4 prompts, max relative logit deviation " + fmt("%.3e", worst), ""};
}

struct ContractionCheck : StepInterceptor {
    explicit ContractionCheck(EmaSmoother& inner) : inner(inner) {}
    void begin_sequence(std::size_t n) override { inner.begin_sequence(n); }
    void on_layer(LayerContext& ctx) override {
        const std::size_t t = ctx.cache.position();
        std::vector<std::vector<float>> raw, prev;
        for (std::size_t h = 0; h < ctx.cache.num_heads(); ++h) {
            const auto k = ctx.cache.read_key(t, h);
            raw.emplace_back(k.begin(), k.end());
            if (t > 0) {
                const auto kp = ctx.cache.read_key(t - 1, h);
                prev.emplace_back(kp.begin(), kp.end());
            }
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

Outcome contraction_suite(std::uint64_t seed) {
    const Model m = init_random(toy_config(seed));
    SmootherConfig sc;
    sc.layer_start = 0;
    sc.layer_end = m.config.num_layers - 1;
    EmaSmoother smoother(sc, m.config);
    ContractionCheck check(smoother);
    std::mt19937_64 rng(seed);
    Decoder(m).greedy_decode(random_prompt(rng, 8, m.config.vocab_size), 64, &check);
    if (check.checked == 0) return {"", "no smoothed steps were observed"};
    if (check.worst > 1e-6) return {"", "contraction identity off by " + fmt("%.3e", check.worst)};
    return {std::to_string(check.checked) + " head-steps, max deviation " + fmt("%.3e", check.worst), ""};
}

Outcome entropy_suite(std::uint64_t seed) {
    for (std::size_t L = 1; L <= 512; ++L) {
        AttentionSnapshot uniform{0, 2, L, std::vector<double>(2 * L, 1.0 / static_cast<double>(L))};
        const double z = row_entropy(uniform);
        const double ln_l = std::log(static_cast<double>(L));
        // eps inside the log biases a uniform row low by ln(1 + L eps) ~ L eps,
        // so ln L itself is only within 1e-9 while L eps < 1e-9.
        const double exact = -std::log(1.0 / static_cast<double>(L) + numerics::kDefaultEntropyEps);
        const double bias_bound = static_cast<double>(L) * numerics::kDefaultEntropyEps;
        const bool ok = std::abs(z - exact) <= 1e-12 && ln_l - z >= -1e-12 && ln_l - z <= bias_bound + 1e-12 &&
                        (bias_bound >= 1e-9 || std::abs(z - ln_l) <= 1e-9);
        if (!ok) return {"", "uniform row of length " + std::to_string(L) + " has entropy " + fmt("%.12f", z)};
        AttentionSnapshot hot{0, 1, L, std::vector<double>(L, 0.0)};
        hot.probs[L - 1] = 1.0;
        if (std::abs(row_entropy(hot)) > 1e-9) return {"", "one-hot row has non-zero entropy"};
    }
    const Model m = init_random(toy_config(seed));
    SmootherConfig sc;
    sc.layer_start = 0;
    sc.layer_end = m.config.num_layers - 1;
    auto hook = make_interceptor(sc, m.config);
    std::mt19937_64 rng(seed);
    Decoder(m).greedy_decode(random_prompt(rng, 6, m.config.vocab_size), 48, hook.get());
    for (const auto& d : hook->decisions()) {
        if (d.z < 0.0 || d.z > std::log(static_cast<double>(d.step + 1)) + 1e-9) {
            return {"", "recorded z " + fmt("%.6f", d.z) + " outside [0, ln L] at step " + std::to_string(d.step)};
        }
    }
    return {"uniform/one-hot rows L=1..512 (ln L within L*eps) and " + std::to_string(hook->decisions().size()) + " recorded z", ""};
}

Outcome lambda_range_suite(std::uint64_t seed) {
    const Model m = init_random(toy_config(seed));
    std::mt19937_64 rng(seed);
    const auto prompt = random_prompt(rng, 10, m.config.vocab_size);
    std::size_t checked = 0;
    for (double ref : {0.3, 0.5, 0.7, 0.9}) {
        SmootherConfig sc;
        sc.lambda_ref = ref;
        sc.layer_start = 0;
        sc.layer_end = m.config.num_layers - 1;
        auto hook = make_interceptor(sc, m.config);
        Decoder(m).greedy_decode(prompt, 64, hook.get());
        const double hat_max = static_cast<double>(sc.queue_capacity - 1) / static_cast<double>(sc.queue_capacity);
        for (const auto& d : hook->decisions()) {
            ++checked;
            if (!d.lambda_hat || *d.lambda_hat < 0.0 || *d.lambda_hat > hat_max + 1e-15) {
                return {"", "lambda_hat outside [0, (M-1)/M] at lambda_ref " + fmt("%.1f", ref)};
            }
            const double lo = std::max(0.0, ref - sc.clip_width), hi = std::min(1.0, ref + sc.clip_width);
            if (d.lambda_tilde < lo - 1e-12 || d.lambda_tilde > hi + 1e-12) {
                return {"", "lambda_tilde " + fmt("%.6f", d.lambda_tilde) + " outside clip window at lambda_ref " +
                                fmt("%.1f", ref)};
            }
        }
    }
    return {std::to_string(checked) + " decisions across lambda_ref 0.3..0.9", ""};
}

}  // namespace

std::vector<SuiteResult> run_all(const Options& options) {
    struct Suite {
        const char* name;
        std::function<Outcome(std::uint64_t)> body;
    };
    const std::vector<Suite> suites{
        {"map_oracle", map_oracle_suite},
        {"queue_rank", [&](std::uint64_t s) { return queue_rank_suite(s, options.inject_rank_fault); }},
        {"ema_closed_form", ema_closed_form_suite},
        {"lambda_zero_identity", lambda_zero_suite},
        {"contraction", contraction_suite},
        {"entropy_bounds", entropy_suite},
        {"lambda_ranges", lambda_range_suite},
    };
    std::vector<SuiteResult> out;
    for (std::size_t i = 0; i < suites.size(); ++i) {
        SuiteResult r;
        r.name = suites[i].name;
        r.seed = options.seed + i;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            const auto o = suites[i].body(r.seed);
            r.passed = o.failure.empty();
            r.detail = r.passed ? o.summary : o.failure;
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = std::string("threw: ") + e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(r));
    }
    return out;
}

int cmd_verify(const Options& options, std::ostream& out) {
    const auto results = run_all(options);
    bool ok = true;
    char buf[96];
    for (const auto& r : results) {
        ok = ok && r.passed;
        std::snprintf(buf, sizeof buf, "%-4s %-22s %7.3f s  ", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds);
        out << buf << r.detail;
        if (!r.passed) out << "  [suite seed " << r.seed << "; reproduce with --seed " << options.seed << "]";
        out << '\n';
    }
    out << (ok ? "verify: all suites passed\n" : "verify: FAILED\n");
    return ok ? 0 : 4;
}

}  // namespace kvsmooth::verify
