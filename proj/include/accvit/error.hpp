#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace accvit {

enum class ErrorCode {
  kShapeMismatch,
  kInvalidGroups,
  kIndivisibleDims,
  kInconsistentMetadata,
  kBranchCountMismatch,
  kOddInput,
  kNotScalar,
  kDetachedTensor,
  kNonFinite,
  kInvalidConfig,
  kUnknownVariant,
  kBadMagic,
  kVersionMismatch,
  kTruncatedFile,
  kBadImage,
  kIo,
};

constexpr std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kInvalidGroups: return "InvalidGroups";
    case ErrorCode::kIndivisibleDims: return "IndivisibleDims";
    case ErrorCode::kInconsistentMetadata: return "InconsistentMetadata";
    case ErrorCode::kBranchCountMismatch: return "BranchCountMismatch";
    case ErrorCode::kOddInput: return "OddInput";
    case ErrorCode::kNotScalar: return "NotScalar";
    case ErrorCode::kDetachedTensor: return "DetachedTensor";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kUnknownVariant: return "UnknownVariant";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kVersionMismatch: return "VersionMismatch";
    case ErrorCode::kTruncatedFile: return "TruncatedFile";
    case ErrorCode::kBadImage: return "BadImage";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace accvit
