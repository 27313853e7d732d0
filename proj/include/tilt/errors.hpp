#pragma once

#include <stdexcept>
#include <string>

namespace tilt {

enum class ErrorCode {
  InvalidArgument,
  DimensionMismatch,
  InvalidGrid,
  InvalidCorrelation,
  RankDeficientDriftMap,
  IncompatibleClaim,
  DegeneratePayoff,
  NonFiniteObjective,
  NonFiniteEstimate,
  ConvergenceFailure,
  SingularHessian,
  BracketFailure,
  ResourceError,
  ConfigError,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::InvalidGrid: return "InvalidGrid";
    case ErrorCode::InvalidCorrelation: return "InvalidCorrelation";
    case ErrorCode::RankDeficientDriftMap: return "RankDeficientDriftMap";
    case ErrorCode::IncompatibleClaim: return "IncompatibleClaim";
    case ErrorCode::DegeneratePayoff: return "DegeneratePayoff";
    case ErrorCode::NonFiniteObjective: return "NonFiniteObjective";
    case ErrorCode::NonFiniteEstimate: return "NonFiniteEstimate";
    case ErrorCode::ConvergenceFailure: return "ConvergenceFailure";
    case ErrorCode::SingularHessian: return "SingularHessian";
    case ErrorCode::BracketFailure: return "BracketFailure";
    case ErrorCode::ResourceError: return "ResourceError";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  /// Numerical failures as opposed to bad input.
  bool numerical() const noexcept {
    switch (code_) {
      case ErrorCode::DegeneratePayoff:
      case ErrorCode::NonFiniteObjective:
      case ErrorCode::NonFiniteEstimate:
      case ErrorCode::ConvergenceFailure:
      case ErrorCode::SingularHessian:
      case ErrorCode::BracketFailure:
        return true;
      default:
        return false;
    }
  }

 private:
  ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) throw Error(code, what);
}

}  // namespace tilt
