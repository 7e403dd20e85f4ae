#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace saliency {

// Every failure raised by the library carries one of these categories. The
// category name is prefixed to the message so it survives into CLI output.
enum class ErrorKind {
  InvalidArgument,
  ShapeMismatch,
  ParseError,
  ShapeChainError,
  MissingParameter,
  OrphanParameter,
  ParameterShapeMismatch,
  FormatError,
  TruncatedFile,
  UnsupportedFormat,
  IoError,
  NotCamCompatible,
  UnknownLayer,
  GraphStateError,
  DegenerateRanks,
  GeometryError,
};

constexpr std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::ShapeChainError: return "ShapeChainError";
    case ErrorKind::MissingParameter: return "MissingParameter";
    case ErrorKind::OrphanParameter: return "OrphanParameter";
    case ErrorKind::ParameterShapeMismatch: return "ParameterShapeMismatch";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::NotCamCompatible: return "NotCamCompatible";
    case ErrorKind::UnknownLayer: return "UnknownLayer";
    case ErrorKind::GraphStateError: return "GraphStateError";
    case ErrorKind::DegenerateRanks: return "DegenerateRanks";
    case ErrorKind::GeometryError: return "GeometryError";
  }
  return "Error";
}

/// Input errors are problems with files, flags or model descriptions that the
/// caller can fix; everything else is a failure during computation.
constexpr bool is_input_error(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ParseError:
    case ErrorKind::ShapeChainError:
    case ErrorKind::MissingParameter:
    case ErrorKind::OrphanParameter:
    case ErrorKind::ParameterShapeMismatch:
    case ErrorKind::FormatError:
    case ErrorKind::TruncatedFile:
    case ErrorKind::UnsupportedFormat:
    case ErrorKind::IoError:
    case ErrorKind::NotCamCompatible:
    case ErrorKind::UnknownLayer:
    case ErrorKind::InvalidArgument:
      return true;
    default:
      return false;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + detail),
        kind_(kind),
        detail_(detail) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

}  // namespace saliency
