#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tgsn {

// Every failure the library raises carries one of these codes. The CLI maps
// the category of the code onto its exit status.
enum class ErrorCode {
  // configuration
  InvalidConfig,
  // data / file format
  MalformedHeader,
  ChannelMismatch,
  SampleCountMismatch,
  NonFiniteSample,
  InvalidRecording,
  BandOutOfNyquist,
  EmptyEpochs,
  ShapeMismatch,
  FoldError,
  EmptySplit,
  MissingClassParams,
  IoError,
  // numeric
  ZeroVariance,
  TooShort,
  NoMatches,
  SegmentTooLong,
  ZeroPower,
  ShapeError,
  NonFiniteGradient,
  Diverged,
  SamplingDiverged,
  StepOutOfRange,
  DegenerateLossRatio,
  ClassOutOfRange,
  UndefinedAuc,
  DimensionMismatch,
};

enum class ErrorCategory { Config = 1, Data = 2, Numeric = 3 };

inline constexpr std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::ChannelMismatch: return "ChannelMismatch";
    case ErrorCode::SampleCountMismatch: return "SampleCountMismatch";
    case ErrorCode::NonFiniteSample: return "NonFiniteSample";
    case ErrorCode::InvalidRecording: return "InvalidRecording";
    case ErrorCode::BandOutOfNyquist: return "BandOutOfNyquist";
    case ErrorCode::EmptyEpochs: return "EmptyEpochs";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::FoldError: return "FoldError";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::MissingClassParams: return "MissingClassParams";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::NoMatches: return "NoMatches";
    case ErrorCode::SegmentTooLong: return "SegmentTooLong";
    case ErrorCode::ZeroPower: return "ZeroPower";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::SamplingDiverged: return "SamplingDiverged";
    case ErrorCode::StepOutOfRange: return "StepOutOfRange";
    case ErrorCode::DegenerateLossRatio: return "DegenerateLossRatio";
    case ErrorCode::ClassOutOfRange: return "ClassOutOfRange";
    case ErrorCode::UndefinedAuc: return "UndefinedAuc";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
  }
  return "Unknown";
}

inline constexpr ErrorCategory category(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidConfig:
      return ErrorCategory::Config;
    case ErrorCode::MalformedHeader:
    case ErrorCode::ChannelMismatch:
    case ErrorCode::SampleCountMismatch:
    case ErrorCode::NonFiniteSample:
    case ErrorCode::InvalidRecording:
    case ErrorCode::BandOutOfNyquist:
    case ErrorCode::EmptyEpochs:
    case ErrorCode::ShapeMismatch:
    case ErrorCode::FoldError:
    case ErrorCode::EmptySplit:
    case ErrorCode::MissingClassParams:
    case ErrorCode::IoError:
      return ErrorCategory::Data;
    default:
      return ErrorCategory::Numeric;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, std::string(to_string(code)) + ": " + what);
}

}  // namespace tgsn
