#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace himo {

enum class ErrorCode {
  kInvalidArgument,
  kShapeMismatch,
  kDegenerateRotation,
  kDegenerateGeometry,
  kNotOrthonormal,
  kOutOfRange,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kFormat,
  kDtypeMismatch,
  kIo,
  kConfig,
  kUnsatisfiable,
  kNumerical,
};

std::string_view to_string(ErrorCode code);

/// Every failure in the library surfaces as this exception; `code()` is stable
/// and is what the CLI reports in its structured error output.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

}  // namespace himo
