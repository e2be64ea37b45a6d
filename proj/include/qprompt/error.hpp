#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qprompt {

enum class ErrorCode {
  NonFinite,
  DegenerateTensor,
  LengthMismatch,
  IndexOverflow,
  BadMagic,
  UnsupportedVersion,
  Truncated,
  EmptyTensor,
  ZeroNorm,
  BadConfig,
  NonPositive,
  Io,
};

constexpr std::string_view error_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DegenerateTensor: return "DegenerateTensor";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::IndexOverflow: return "IndexOverflow";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::EmptyTensor: return "EmptyTensor";
    case ErrorCode::ZeroNorm: return "ZeroNorm";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::NonPositive: return "NonPositive";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so that
/// callers (the CLI in particular) can map it to a stable error record.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  std::string_view name() const noexcept { return error_name(code_); }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace qprompt
