#include "himo/error.hpp"

namespace himo {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kDegenerateRotation: return "degenerate_rotation";
    case ErrorCode::kDegenerateGeometry: return "degenerate_geometry";
    case ErrorCode::kNotOrthonormal: return "not_orthonormal";
    case ErrorCode::kOutOfRange: return "out_of_range";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kVersionMismatch: return "version_mismatch";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kDtypeMismatch: return "dtype_mismatch";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kUnsatisfiable: return "unsatisfiable";
    case ErrorCode::kNumerical: return "numerical";
  }
  return "unknown";
}

}  // namespace himo
