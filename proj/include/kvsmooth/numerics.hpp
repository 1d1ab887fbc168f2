// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

namespace kvsmooth::numerics {

inline constexpr double kDefaultEntropyEps = 1e-10;
inline constexpr double kProbSumTolerance = 1e-6;

// Numerically stable softmax (max-subtracted). Throws Error{EmptyInput} or
// Error{NonFinite}.
std::vector<double> softmax(std::span<const double> scores);
void softmax_into(std::span<const double> scores, std::span<double> out);

// Throws Error{InvalidDistribution} unless every entry is in [0,1] and the
// entries sum to 1 within kProbSumTolerance.
void check_prob_row(std::span<const double> probs);

/// Shannon entropy in nats, -sum p_j log(p_j + eps).
///
/// With eps > 0 the value is bounded below by -log(1 + eps) (a one-hot row)
/// and above by log(L) plus a correction of order L * eps, so a one-hot row
/// yields about -1e-10 at the default eps rather than exactly zero.
double entropy(std::span<const double> probs, double eps = kDefaultEntropyEps);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

// Throws Error{LengthMismatch} or Error{ZeroNorm}.
double cosine(std::span<const double> a, std::span<const double> b);

}  // namespace kvsmooth::numerics
