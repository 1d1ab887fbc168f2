// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace kvsmooth::verify {

struct Options {
    std::uint64_t seed = 20261017;
    // Mutation sentinel: perturbs the rank under test by one so the rank
    // suite must fail.
    bool inject_rank_fault = false;
};

struct SuiteResult {
    std::string name;
    bool passed = false;
    double seconds = 0.0;
    std::uint64_t seed = 0;
    std::string detail;  // summary on success, violated invariant on failure
};

std::vector<SuiteResult> run_all(const Options& options);
// Prints one line per suite; returns 0 when all pass and 4 otherwise.
int cmd_verify(const Options& options, std::ostream& out);

}  // namespace kvsmooth::verify
