#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tes {

enum class ErrorCode {
    MalformedCase,
    NotRadial,
    DuplicateBusId,
    ZeroImpedanceBranch,
    RateLimitExceeded,
    SocOutOfRange,
    DispatchOutOfRange,
    NegativeLoss,
    DimensionMismatch,
    Diverged,
    SingularJacobian,
    InfeasibleScenario,
    MissingBaseline,
    EmptyTradingStep,
    ZeroTradedEnergy,
    PriceOutOfBounds,
    WrongLength,
    ConfigInvalid,
    SolverFailure,
    IoFailure,
};

std::string_view to_string(ErrorCode code);

// Every library failure carries a code so callers (and the CLI exit status)
// can branch on the kind of failure without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace tes
