#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dualcp {

enum class ErrorCode {
  Io,
  BadMagic,
  CorruptHeader,
  Truncated,
  LabelOutOfRange,
  DomainOutOfRange,
  NonFinite,
  Empty,
  ShapeMismatch,
  NotNormalized,
  InvalidManifest,
  ZeroVector,
  TooManyClassesForDim,
  RankDeficient,
  SingletonETF,
  BadThreshold,
  MissingClass,
  DegenerateOutput,
  Diverged,
  BadConfig,
  MissingDomain,
  Undefined,
  Infeasible,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::Io: return "Io";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::CorruptHeader: return "CorruptHeader";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::DomainOutOfRange: return "DomainOutOfRange";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::Empty: return "Empty";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::InvalidManifest: return "InvalidManifest";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::TooManyClassesForDim: return "TooManyClassesForDim";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::SingletonETF: return "SingletonETF";
    case ErrorCode::BadThreshold: return "BadThreshold";
    case ErrorCode::MissingClass: return "MissingClass";
    case ErrorCode::DegenerateOutput: return "DegenerateOutput";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::MissingDomain: return "MissingDomain";
    case ErrorCode::Undefined: return "Undefined";
    case ErrorCode::Infeasible: return "Infeasible";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code,
/// so callers (and tests) can branch on the kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace dualcp
