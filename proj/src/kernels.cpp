// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvsmooth/kernels.hpp"

#include <cmath>

#include "kvsmooth/error.hpp"
#include "kvsmooth/numerics.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kvsmooth::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelThreshold = 1 << 15;

inline float row_dot(const float* row, const float* x, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t k = 0; k < n; ++k) acc += row[k] * x[k];
    return acc;
}

void check_matvec(std::span<const float> w, std::size_t rows, std::size_t cols,
                  std::span<const float> x, std::span<float> y) {
    if (w.size() != rows * cols || x.size() != cols || y.size() != rows) {
        throw Error(Errc::LengthMismatch, "matvec operand shapes");
    }
}

bool in_parallel() {
#ifdef _OPENMP
    return omp_in_parallel() != 0;
#else
    return true;
#endif
}

void attend_head(const AttentionShape& s, std::size_t h, std::span<const float> q,
                 std::span<const float> keys, std::span<const float> values,
                 std::span<double> scratch, std::span<double> probs, std::span<float> out) {
    const std::size_t stride = s.heads * s.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(s.head_dim));
    const float* qh = q.data() + h * s.head_dim;
    auto scores = scratch.subspan(h * s.context, s.context);
    auto row = probs.subspan(h * s.context, s.context);
    for (std::size_t j = 0; j < s.context; ++j) {
        const float* kj = keys.data() + j * stride + h * s.head_dim;
        scores[j] = static_cast<double>(row_dot(qh, kj, s.head_dim)) * scale;
    }
    numerics::softmax_into(scores, row);

    float* oh = out.data() + h * s.head_dim;
    for (std::size_t c = 0; c < s.head_dim; ++c) oh[c] = 0.0f;
    for (std::size_t j = 0; j < s.context; ++j) {
        const float a = static_cast<float>(row[j]);
        const float* vj = values.data() + j * stride + h * s.head_dim;
        for (std::size_t c = 0; c < s.head_dim; ++c) oh[c] += a * vj[c];
    }
}

void check_attend(const AttentionShape& s, std::span<const float> q, std::span<const float> keys,
                  std::span<const float> values, std::span<double> scratch,
                  std::span<double> probs, std::span<float> out) {
    const std::size_t width = s.heads * s.head_dim;
    if (s.context == 0) throw Error(Errc::EmptyInput, "attention over an empty context");
    if (q.size() != width || out.size() != width || keys.size() < s.context * width ||
        values.size() < s.context * width || scratch.size() < s.heads * s.context ||
        probs.size() < s.heads * s.context) {
        throw Error(Errc::LengthMismatch, "attention operand shapes");
    }
}

}  // namespace

void matvec_serial(std::span<const float> w, std::size_t rows, std::size_t cols,
                   std::span<const float> x, std::span<float> y) {
    check_matvec(w, rows, cols, x, y);
    for (std::size_t r = 0; r < rows; ++r) y[r] = row_dot(w.data() + r * cols, x.data(), cols);
}

void matvec_parallel(std::span<const float> w, std::size_t rows, std::size_t cols,
                     std::span<const float> x, std::span<float> y) {
    check_matvec(w, rows, cols, x, y);
    const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t r = 0; r < n; ++r) {
        y[static_cast<std::size_t>(r)] =
            row_dot(w.data() + static_cast<std::size_t>(r) * cols, x.data(), cols);
    }
}

void matvec(std::span<const float> w, std::size_t rows, std::size_t cols,
            std::span<const float> x, std::span<float> y) {
    if (rows * cols >= kParallelThreshold && max_threads() > 1 && !in_parallel()) {
        matvec_parallel(w, rows, cols, x, y);
    } else {
        matvec_serial(w, rows, cols, x, y);
    }
}

void attend_serial(const AttentionShape& shape, std::span<const float> q,
                   std::span<const float> keys, std::span<const float> values,
                   std::span<double> scratch, std::span<double> probs, std::span<float> out) {
    check_attend(shape, q, keys, values, scratch, probs, out);
    for (std::size_t h = 0; h < shape.heads; ++h) attend_head(shape, h, q, keys, values, scratch, probs, out);
}

void attend_parallel(const AttentionShape& shape, std::span<const float> q,
                     std::span<const float> keys, std::span<const float> values,
                     std::span<double> scratch, std::span<double> probs, std::span<float> out) {
    check_attend(shape, q, keys, values, scratch, probs, out);
    const auto n = static_cast<std::ptrdiff_t>(shape.heads);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t h = 0; h < n; ++h) {
        attend_head(shape, static_cast<std::size_t>(h), q, keys, values, scratch, probs, out);
    }
}

void attend(const AttentionShape& shape, std::span<const float> q,
            std::span<const float> keys, std::span<const float> values,
            std::span<double> scratch, std::span<double> probs, std::span<float> out) {
    const std::size_t work = shape.heads * shape.context * shape.head_dim;
    if (work >= kParallelThreshold && shape.heads > 1 && max_threads() > 1 && !in_parallel()) {
        attend_parallel(shape, q, keys, values, scratch, probs, out);
    } else {
        attend_serial(shape, q, keys, values, scratch, probs, out);
    }
}

void mix_values(const AttentionShape& s, std::span<const double> probs,
                std::span<const float> values, std::span<float> out) {
    const std::size_t stride = s.heads * s.head_dim;
    for (std::size_t h = 0; h < s.heads; ++h) {
        float* oh = out.data() + h * s.head_dim;
        for (std::size_t c = 0; c < s.head_dim; ++c) oh[c] = 0.0f;
        for (std::size_t j = 0; j < s.context; ++j) {
            const float a = static_cast<float>(probs[h * s.context + j]);
            const float* vj = values.data() + j * stride + h * s.head_dim;
            for (std::size_t c = 0; c < s.head_dim; ++c) oh[c] += a * vj[c];
        }
    }
}

void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace kvsmooth::kernels
