#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dctir {

enum class ErrorCode {
  UnsupportedFormat,
  CorruptStream,
  TruncatedInput,
  InvalidDimensions,
  InvalidArgument,
  InvalidSelection,
  EmptyTrainingSet,
  ShapeMismatch,
  GraphNotBuilt,
  EmptyDataset,
  SingleClassDataset,
  CorruptCheckpoint,
  VersionMismatch,
  ChecksumMismatch,
  EmptyGallery,
  IoError,
  NoPositives,
  UnknownQuery,
  AllQueriesExcluded,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::CorruptStream: return "CorruptStream";
    case ErrorCode::TruncatedInput: return "TruncatedInput";
    case ErrorCode::InvalidDimensions: return "InvalidDimensions";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidSelection: return "InvalidSelection";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::GraphNotBuilt: return "GraphNotBuilt";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::SingleClassDataset: return "SingleClassDataset";
    case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::UnknownQuery: return "UnknownQuery";
    case ErrorCode::AllQueriesExcluded: return "AllQueriesExcluded";
  }
  return "Unknown";
}

/// Every failure in the library is reported as an Error carrying a code, so
/// callers (the CLI in particular) can map failures to exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace dctir
