#include "trajgeo/error.hpp"

namespace trajgeo {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidLabel: return "invalid-label";
    case ErrorCode::DegenerateStep: return "degenerate-step";
    case ErrorCode::DimensionMismatch: return "dimension-mismatch";
    case ErrorCode::MalformedRecord: return "malformed-record";
    case ErrorCode::MissingStates: return "missing-states";
    case ErrorCode::DuplicateId: return "duplicate-id";
    case ErrorCode::NoCorrectPrefix: return "no-correct-prefix";
    case ErrorCode::UnderdeterminedMoments: return "underdetermined-moments";
    case ErrorCode::InvalidRank: return "invalid-rank";
    case ErrorCode::NonSymmetric: return "non-symmetric";
    case ErrorCode::NonPsd: return "non-psd";
    case ErrorCode::OutOfRange: return "out-of-range";
    case ErrorCode::InsufficientSamples: return "insufficient-samples";
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::LengthMismatch: return "length-mismatch";
    case ErrorCode::Misalignment: return "misalignment";
    case ErrorCode::Divergence: return "divergence";
    case ErrorCode::ConfigError: return "config-error";
    case ErrorCode::Io: return "io";
    case ErrorCode::TheoremCheck: return "theorem-check";
  }
  return "unknown";
}

}  // namespace trajgeo
