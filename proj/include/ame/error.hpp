#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ame {

enum class ErrorCode {
    InvalidGrid,
    InvalidEpsilon,
    InvalidBetaParams,
    InvalidDistribution,
    EmptySources,
    InvalidConfig,
    MalformedRecord,
    StoreCorrupt,
    MissingKnockoffMask,
    InconsistentN,
    InconsistentPLevel,
    UnsupportedDistribution,
    TooLarge,
    NonFinite,
    TooFewRows,
    MissingKnockoffs,
    InvalidTree,
    Io,
};

inline std::string_view to_string(ErrorCode code)
{
    switch (code) {
        case ErrorCode::InvalidGrid: return "InvalidGrid";
        case ErrorCode::InvalidEpsilon: return "InvalidEpsilon";
        case ErrorCode::InvalidBetaParams: return "InvalidBetaParams";
        case ErrorCode::InvalidDistribution: return "InvalidDistribution";
        case ErrorCode::EmptySources: return "EmptySources";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::MalformedRecord: return "MalformedRecord";
        case ErrorCode::StoreCorrupt: return "StoreCorrupt";
        case ErrorCode::MissingKnockoffMask: return "MissingKnockoffMask";
        case ErrorCode::InconsistentN: return "InconsistentN";
        case ErrorCode::InconsistentPLevel: return "InconsistentPLevel";
        case ErrorCode::UnsupportedDistribution: return "UnsupportedDistribution";
        case ErrorCode::TooLarge: return "TooLarge";
        case ErrorCode::NonFinite: return "NonFinite";
        case ErrorCode::TooFewRows: return "TooFewRows";
        case ErrorCode::MissingKnockoffs: return "MissingKnockoffs";
        case ErrorCode::InvalidTree: return "InvalidTree";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

/// Errors a user fixes by changing the configuration or command line, as
/// opposed to failures met while running (I/O, bad data, numerics).
inline bool is_config_error(ErrorCode code)
{
    switch (code) {
        case ErrorCode::InvalidGrid:
        case ErrorCode::InvalidEpsilon:
        case ErrorCode::InvalidBetaParams:
        case ErrorCode::InvalidDistribution:
        case ErrorCode::EmptySources:
        case ErrorCode::InvalidConfig:
        case ErrorCode::UnsupportedDistribution:
        case ErrorCode::TooLarge:
        case ErrorCode::InvalidTree:
            return true;
        default:
            return false;
    }
}

/// Every failure raised by the library carries a code so callers (and the
/// CLI exit-code mapping) can dispatch without parsing messages.
class Error : public std::runtime_error
{
public:
    Error(ErrorCode code, const std::string& msg)
        : std::runtime_error(std::string(to_string(code)) + ": " + msg), code_(code)
    {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

} // namespace ame
