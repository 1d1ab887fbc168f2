// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "kvsmooth/decoder.hpp"
#include "kvsmooth/kernels.hpp"
#include "kvsmooth/model.hpp"
#include "kvsmooth/smoother.hpp"

namespace {

using namespace kvsmooth;

std::vector<float> random_floats(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

template <bool Parallel>
void BM_Matvec(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto w = random_floats(n * n, 1), x = random_floats(n, 2);
    std::vector<float> y(n);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::matvec_parallel(w, n, n, x, y);
        } else {
            kernels::matvec_serial(w, n, n, x, y);
        }
        benchmark::DoNotOptimize(y.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_Matvec<false>)->Name("matvec/serial")->RangeMultiplier(4)->Range(64, 1024);
BENCHMARK(BM_Matvec<true>)->Name("matvec/parallel")->RangeMultiplier(4)->Range(64, 1024);

template <bool Parallel>
void BM_Attend(benchmark::State& state) {
    const kernels::AttentionShape shape{8, 64, static_cast<std::size_t>(state.range(0))};
    const std::size_t hd = shape.heads * shape.head_dim;
    const auto q = random_floats(hd, 3), k = random_floats(shape.context * hd, 4),
               v = random_floats(shape.context * hd, 5);
    std::vector<double> scratch(shape.heads * shape.context), probs(shape.heads * shape.context);
    std::vector<float> out(hd);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::attend_parallel(shape, q, k, v, scratch, probs, out);
        } else {
            kernels::attend_serial(shape, q, k, v, scratch, probs, out);
        }
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(shape.context * hd));
}
BENCHMARK(BM_Attend<false>)->Name("attend/serial")->RangeMultiplier(4)->Range(64, 1024);
BENCHMARK(BM_Attend<true>)->Name("attend/parallel")->RangeMultiplier(4)->Range(64, 1024);

// Whole greedy decode on the toy model, without and with the smoother.
void BM_Decode(benchmark::State& state) {
    ModelConfig c;
    c.num_layers = 4;
    c.num_heads = 4;
    c.head_dim = 16;
    c.hidden_dim = 64;
    c.ffn_dim = 256;
    c.vocab_size = 256;
    c.max_seq_len = 128;
    const Model m = init_random(c);
    SmootherConfig sc;
    sc.layer_start = 1;
    sc.layer_end = 3;
    auto smoother = make_interceptor(sc, c);
    smoother->set_record_decisions(false);
    Decoder dec(m);
    KVCache cache(c);
    const std::vector<TokenId> prompt{1, 2, 3, 4, 5, 6, 7, 8};
    StepInterceptor* hook = state.range(0) ? smoother.get() : nullptr;
    for (auto _ : state) {
        cache.clear();
        benchmark::DoNotOptimize(dec.greedy_decode(cache, prompt, 64, hook).generated.data());
    }
    state.SetItemsProcessed(state.iterations() * 64);
    state.SetLabel(state.range(0) ? "smoothed" : "baseline");
}
BENCHMARK(BM_Decode)->Name("decode/toy")->Arg(0)->Arg(1);

}  // namespace

BENCHMARK_MAIN();
