// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvsmooth/error.hpp"

namespace kvsmooth {

std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::EmptyInput: return "empty input";
        case Errc::NonFinite: return "non-finite input";
        case Errc::InvalidDistribution: return "invalid probability row";
        case Errc::LengthMismatch: return "length mismatch";
        case Errc::ZeroNorm: return "zero-norm vector";
        case Errc::InvalidConfig: return "invalid config";
        case Errc::PositionMismatch: return "position mismatch";
        case Errc::InvalidToken: return "token id out of range";
        case Errc::CacheInconsistent: return "cache/config inconsistency";
        case Errc::BudgetExceeded: return "budget exceeded";
        case Errc::CacheAccess: return "illegal cache access";
        case Errc::BadMagic: return "bad magic";
        case Errc::VersionMismatch: return "version mismatch";
        case Errc::HeaderInconsistent: return "header inconsistent";
        case Errc::TruncatedPayload: return "truncated payload";
        case Errc::Io: return "i/o error";
        case Errc::Schema: return "schema violation";
        case Errc::MissingAnnotation: return "missing annotation";
        case Errc::HistoryNotRetained: return "attention history not retained";
    }
    return "unknown";
}

}  // namespace kvsmooth
