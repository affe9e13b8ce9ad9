#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "himo/motion_repr.hpp"

namespace himo {

inline constexpr std::uint8_t kContainerVersion = 0x01;
inline constexpr int kArchiveSchemaVersion = 1;

enum class DType : std::uint8_t { kFloat32 = 0, kInt64 = 1, kFloat64 = 2 };

/// One named, row-major array in a tensors.bin container. Floating data is held
/// as double in memory regardless of the on-disk dtype.
struct Tensor {
  std::string name;
  DType dtype = DType::kFloat32;
  std::vector<std::uint32_t> dims;
  std::vector<double> real;
  std::vector<std::int64_t> integer;

  std::size_t element_count() const;

  static Tensor from_matrix(std::string name, const Mat& m, std::vector<std::uint32_t> dims = {},
                            DType dtype = DType::kFloat32);
  static Tensor from_ints(std::string name, const std::vector<std::int64_t>& values,
                          std::vector<std::uint32_t> dims = {});
  /// Reshapes to rows x (product of the remaining dims).
  Mat to_matrix() const;
};

class TensorFile {
 public:
  TensorFile() = default;
  explicit TensorFile(std::vector<Tensor> tensors);

  void add(Tensor t);
  bool contains(const std::string& name) const;
  /// Throws kFormat when missing.
  const Tensor& get(const std::string& name) const;
  /// Checks dtype family and exact dims, then returns the matrix view.
  Mat matrix(const std::string& name, const std::vector<std::uint32_t>& dims) const;
  const std::vector<Tensor>& tensors() const { return tensors_; }

  std::vector<std::uint8_t> serialize() const;
  static TensorFile deserialize(const std::vector<std::uint8_t>& bytes);

  void write(const std::filesystem::path& path) const;
  static TensorFile read(const std::filesystem::path& path);

 private:
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Rounds every stored array to float32 precision so the archive round-trip is
/// bit-exact.
void quantize_to_float32(HoiSequence& seq);

/// Writes `dir/meta.json` and `dir/tensors.bin`.
void write_archive(const std::filesystem::path& dir, const HoiSequence& seq);
HoiSequence read_archive(const std::filesystem::path& dir);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace himo
