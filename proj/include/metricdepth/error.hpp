#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace metricdepth {

enum class ErrorCode {
  NonPositiveDepth,
  PointBehindCamera,
  LogNearPi,
  ShapeMismatch,
  EmptyMask,
  InsufficientOverlap,
  Diverged,
  ParseError,
  NonMonotonicTimestamps,
  NonUnitQuaternion,
  IndexOutOfRange,
  NoMatchWithinTolerance,
  InsufficientSamples,
  UnitMismatch,
  IoError,
  MissingScale,
  RegistrationFailed,
  EmptyMap,
  LengthMismatch,
  DegenerateAlignment,
  IcpDiverged,
  NoSurfaceVisible,
  InvalidArgument,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::PointBehindCamera: return "PointBehindCamera";
    case ErrorCode::LogNearPi: return "LogNearPi";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::InsufficientOverlap: return "InsufficientOverlap";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::NonMonotonicTimestamps: return "NonMonotonicTimestamps";
    case ErrorCode::NonUnitQuaternion: return "NonUnitQuaternion";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::NoMatchWithinTolerance: return "NoMatchWithinTolerance";
    case ErrorCode::InsufficientSamples: return "InsufficientSamples";
    case ErrorCode::UnitMismatch: return "UnitMismatch";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::MissingScale: return "MissingScale";
    case ErrorCode::RegistrationFailed: return "RegistrationFailed";
    case ErrorCode::EmptyMap: return "EmptyMap";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::DegenerateAlignment: return "DegenerateAlignment";
    case ErrorCode::IcpDiverged: return "IcpDiverged";
    case ErrorCode::NoSurfaceVisible: return "NoSurfaceVisible";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable error code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace metricdepth
