#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace trajgeo {

enum class ErrorCode {
  InvalidLabel,
  DegenerateStep,
  DimensionMismatch,
  MalformedRecord,
  MissingStates,
  DuplicateId,
  NoCorrectPrefix,
  UnderdeterminedMoments,
  InvalidRank,
  NonSymmetric,
  NonPsd,
  OutOfRange,
  InsufficientSamples,
  InvalidArgument,
  LengthMismatch,
  Misalignment,
  Divergence,
  ConfigError,
  Io,
  TheoremCheck,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries a machine-readable code.
/// The CLI maps TheoremCheck to exit status 3 and everything else to 2.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), detail_(what) {}

  ErrorCode code() const noexcept { return code_; }
  /// The message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace trajgeo
