// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>

namespace kvsmooth::kernels {

// Row-major matrix-vector product y = W x, W is rows x cols.
//
// The serial and OpenMP variants share the same per-row accumulation, so they
// produce bit-identical results at any thread count. matvec() picks the
// parallel path for large products unless already inside a parallel region.
void matvec_serial(std::span<const float> w, std::size_t rows, std::size_t cols,
                   std::span<const float> x, std::span<float> y);
void matvec_parallel(std::span<const float> w, std::size_t rows, std::size_t cols,
                     std::span<const float> x, std::span<float> y);
void matvec(std::span<const float> w, std::size_t rows, std::size_t cols,
            std::span<const float> x, std::span<float> y);

// Multi-head scaled dot-product attention for a single query position.
//
// q:       [heads * head_dim]
// keys:    [context][heads][head_dim] (cache layout), same for values
// probs:   [heads * context] receives each head's softmax row (64-bit)
// scratch: [heads * context] scores workspace
// out:     [heads * head_dim]
struct AttentionShape {
    std::size_t heads;
    std::size_t head_dim;
    std::size_t context;
};

void attend_serial(const AttentionShape& shape, std::span<const float> q,
                   std::span<const float> keys, std::span<const float> values,
                   std::span<double> scratch, std::span<double> probs, std::span<float> out);
void attend_parallel(const AttentionShape& shape, std::span<const float> q,
                     std::span<const float> keys, std::span<const float> values,
                     std::span<double> scratch, std::span<double> probs, std::span<float> out);
void attend(const AttentionShape& shape, std::span<const float> q,
            std::span<const float> keys, std::span<const float> values,
            std::span<double> scratch, std::span<double> probs, std::span<float> out);

// Weighted sum of value rows with fixed attention weights (no softmax).
void mix_values(const AttentionShape& shape, std::span<const double> probs,
                std::span<const float> values, std::span<float> out);

// Thread count helpers; no-ops when built without OpenMP.
void set_num_threads(int n);
int max_threads();

}  // namespace kvsmooth::kernels
