// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvsmooth/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kvsmooth/error.hpp"

namespace kvsmooth::numerics {

namespace {

void require_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw Error(Errc::NonFinite, what);
    }
}

}  // namespace

void softmax_into(std::span<const double> scores, std::span<double> out) {
    if (scores.empty()) throw Error(Errc::EmptyInput, "softmax of an empty vector");
    if (out.size() != scores.size()) throw Error(Errc::LengthMismatch, "softmax output size");
    require_finite(scores, "softmax scores");

    const double peak = *std::max_element(scores.begin(), scores.end());
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp(scores[i] - peak);
        total += out[i];
    }
    const double inv = 1.0 / total;
    for (double& p : out) p *= inv;
}

std::vector<double> softmax(std::span<const double> scores) {
    std::vector<double> out(scores.size());
    softmax_into(scores, out);
    return out;
}

void check_prob_row(std::span<const double> probs) {
    if (probs.empty()) throw Error(Errc::InvalidDistribution, "empty probability row");
    double total = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw Error(Errc::InvalidDistribution, "entry outside [0,1]: " + std::to_string(p));
        }
        total += p;
    }
    if (std::abs(total - 1.0) > kProbSumTolerance) {
        throw Error(Errc::InvalidDistribution, "row sums to " + std::to_string(total));
    }
}

double entropy(std::span<const double> probs, double eps) {
    if (!(eps >= 0.0) || !std::isfinite(eps)) throw Error(Errc::InvalidConfig, "entropy eps must be >= 0");
    check_prob_row(probs);
    double h = 0.0;
    for (double p : probs) {
        // 0 * log(0) is taken as 0 when eps == 0.
        if (p > 0.0 || eps > 0.0) h -= p * std::log(p + eps);
    }
    return h;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error(Errc::LengthMismatch, "dot operands");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error(Errc::LengthMismatch, "cosine operands");
    if (a.empty()) throw Error(Errc::EmptyInput, "cosine of empty vectors");
    require_finite(a, "cosine lhs");
    require_finite(b, "cosine rhs");
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) throw Error(Errc::ZeroNorm, "cosine with a zero-norm vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

}  // namespace kvsmooth::numerics
