#pragma once

#include <stdexcept>
#include <string>

namespace advpatch {

enum class ErrorCode {
  DegeneratePoint,
  Singular,
  DegenerateConfiguration,
  MalformedHeader,
  TruncatedPayload,
  UnsupportedMaxval,
  CropTooLarge,
  DegenerateQuad,
  BadMagic,
  ShapeMismatch,
  MissingTensor,
  UnknownTensor,
  TrailingBytes,
  BadDimensions,
  ImageTooSmall,
  BadCellSize,
  IncompatibleDims,
  InvalidConfig,
  MaskTooLarge,
  NoValidPlacement,
  DimensionMismatch,
  TooFewMatches,
  NoModel,
  MissingFile,
  UnreadableHomography,
  EmptyDenominator,
  Io,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegeneratePoint: return "DegeneratePoint";
    case ErrorCode::Singular: return "Singular";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::UnsupportedMaxval: return "UnsupportedMaxval";
    case ErrorCode::CropTooLarge: return "CropTooLarge";
    case ErrorCode::DegenerateQuad: return "DegenerateQuad";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingTensor: return "MissingTensor";
    case ErrorCode::UnknownTensor: return "UnknownTensor";
    case ErrorCode::TrailingBytes: return "TrailingBytes";
    case ErrorCode::BadDimensions: return "BadDimensions";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::BadCellSize: return "BadCellSize";
    case ErrorCode::IncompatibleDims: return "IncompatibleDims";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::MaskTooLarge: return "MaskTooLarge";
    case ErrorCode::NoValidPlacement: return "NoValidPlacement";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::TooFewMatches: return "TooFewMatches";
    case ErrorCode::NoModel: return "NoModel";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::UnreadableHomography: return "UnreadableHomography";
    case ErrorCode::EmptyDenominator: return "EmptyDenominator";
    case ErrorCode::Io: return "Io";
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

 private:
  ErrorCode code_;
};

}  // namespace advpatch
