#include "keycache/error.hpp"

namespace keycache {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::EmptySubset: return "EmptySubset";
    case ErrorCode::DegenerateSplit: return "DegenerateSplit";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::UnknownLayer: return "UnknownLayer";
    case ErrorCode::EmptyCache: return "EmptyCache";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::EmptyGrid: return "EmptyGrid";
    case ErrorCode::NoSuccessfulAttacks: return "NoSuccessfulAttacks";
    case ErrorCode::ConvergenceFailure: return "ConvergenceFailure";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace keycache
