// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kvsmooth {

enum class Errc {
    EmptyInput,
    NonFinite,
    InvalidDistribution,
    LengthMismatch,
    ZeroNorm,
    InvalidConfig,
    PositionMismatch,
    InvalidToken,
    CacheInconsistent,
    BudgetExceeded,
    CacheAccess,
    BadMagic,
    VersionMismatch,
    HeaderInconsistent,
    TruncatedPayload,
    Io,
    Schema,
    MissingAnnotation,
    HistoryNotRetained,
};

std::string_view to_string(Errc code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (and tests) can tell error kinds apart without parsing messages.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

}  // namespace kvsmooth
