#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "himo/error.hpp"

namespace himo {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using RowVec = Eigen::RowVectorXd;
using MatI = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

/// First two columns of a rotation matrix, column-major: (m00, m10, m20, m01, m11, m21).
using Rot6d = Eigen::Matrix<double, 6, 1>;

inline constexpr int kObjectFeatureWidth = 9;
inline constexpr int kDefaultSurfaceSamples = 1024;
inline constexpr int kDefaultBasisPoints = 1024;
inline constexpr std::uint64_t kDefaultBasisSeed = 20240101;

inline int human_feature_width(int num_joints) { return 9 * num_joints + 3; }

// ---------------------------------------------------------------------------
// Rotations

/// Gram-Schmidt decode. Throws kDegenerateRotation on near-zero or parallel columns.
Mat3 rot6d_to_matrix(const Rot6d& r);

/// Non-throwing decode used inside training losses; columns are normalized with
/// an epsilon floor so network outputs never abort a step.
Mat3 rot6d_to_matrix_stable(const Rot6d& r);

/// Vector-Jacobian product of rot6d_to_matrix_stable: dL/dr given dL/dM.
Rot6d rot6d_to_matrix_vjp(const Rot6d& r, const Mat3& grad_matrix);

/// Throws kNotOrthonormal when ||M^T M - I|| or |det M - 1| exceeds 1e-4.
Rot6d matrix_to_rot6d(const Mat3& m);

/// Decodes and re-encodes; identity on valid inputs, repairs near-valid ones.
Rot6d project_rot6d(const Rot6d& r);

Rot6d identity_rot6d();

Mat3 axis_angle_to_matrix(const Vec3& aa);
Vec3 matrix_to_axis_angle(const Mat3& m);
/// Maps to an equivalent rotation vector with magnitude in [0, pi).
Vec3 canonical_axis_angle(const Vec3& aa);
/// dR/d(aa_k) for k = 0..2.
std::array<Mat3, 3> axis_angle_derivatives(const Vec3& aa);

Mat3 skew(const Vec3& v);

// ---------------------------------------------------------------------------
// Seeded randomness

/// Fixed-algorithm generator: outputs are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Index in [0, n).
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }
  int integer(int lo, int hi_inclusive) {
    return lo + static_cast<int>(index(static_cast<std::size_t>(hi_inclusive - lo + 1)));
  }
  double normal();
  std::uint64_t next() { return engine_(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Mixes a base seed with a stream id (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

Mat3 random_rotation(Rng& rng);

// ---------------------------------------------------------------------------
// Geometry

struct Mesh {
  Mat vertices;  // V x 3
  MatI faces;    // F x 3
};

Mesh make_box(const Vec3& size);
Mesh make_cylinder(double radius, double height, int slices = 16);
Mesh make_sphere(double radius, int stacks = 8, int slices = 12);

struct SurfaceSamples {
  Mat points;                // S x 3
  std::vector<int> faces;    // face index per sample
  Mat barycentric;           // S x 3
};

/// Area-weighted uniform sampling. Throws kDegenerateGeometry on a zero-area mesh.
SurfaceSamples sample_surface(const Mesh& mesh, int count, std::uint64_t seed);
inline Mat sample_surface_points(const Mesh& mesh, int count, std::uint64_t seed) {
  return sample_surface(mesh, count, seed).points;
}

/// Uniform points in the unit ball.
Mat make_bps_basis(int count, std::uint64_t seed);
const Mat& default_bps_basis();

/// code[i] = samples[i] - basis[nearest(i)], ties to the lowest basis index.
Mat bps_encode(const Mat& samples, const Mat& basis);

struct ObjectGeometry {
  std::string name;
  Mesh mesh;                 // object-local, centered on the centroid
  Mat surface_samples;       // S x 3, object-local
  Mat bps_code;              // S x 3
  Vec3 norm_center = Vec3::Zero();
  double norm_scale = 1.0;   // samples are mapped to (p - center) * scale before encoding
};

/// Samples the surface, normalizes into the unit ball and encodes against `basis`.
ObjectGeometry make_object_geometry(std::string name, Mesh mesh, int samples,
                                    std::uint64_t seed, const Mat& basis);

/// Re-encodes a geometry whose local frame is rotated by `rotation`
/// (points p -> R p). Mesh, samples and code are all updated.
ObjectGeometry rotate_geometry(const ObjectGeometry& geometry, const Mat3& rotation,
                               const Mat& basis);

// ---------------------------------------------------------------------------
// Motion containers

struct HumanMotion {
  int num_joints = 0;
  double fps = 30.0;
  Mat positions;     // T x 3J   (joint j at columns 3j..3j+2)
  Mat rotations;     // T x 6J   (Rot6d of joint j at columns 6j..6j+5)
  Mat root;          // T x 3

  int frames() const { return static_cast<int>(positions.rows()); }
  int feature_width() const { return human_feature_width(num_joints); }
  Vec3 joint(int t, int j) const { return positions.block<1, 3>(t, 3 * j).transpose(); }

  /// T x D_h, per-frame concat of positions, rotations and root.
  Mat flatten() const;
  static HumanMotion unflatten(const Mat& features, int num_joints, double fps);
  HumanMotion slice(int start, int count) const;
  void validate() const;
};

struct ObjectTrack {
  Mat rotation;     // T x 6, relative to the geometry frame
  Mat translation;  // T x 3, centroid position
  ObjectGeometry geometry;

  int frames() const { return static_cast<int>(rotation.rows()); }
  Mat flatten() const;  // T x 9
  /// World-space surface samples at frame t (S x 3).
  Mat world_samples(int t) const;
  ObjectTrack slice(int start, int count) const;
  void validate() const;
};

/// Expresses a track relative to its pose at `frame`: that frame's rotation
/// becomes the identity and the geometry is rotated accordingly.
ObjectTrack rebase_track(const ObjectTrack& track, int frame, const Mat& basis);

struct Segment {
  int start = 0;
  int end = 0;
  std::string text;
};

struct HoiSequence {
  std::string id;
  HumanMotion human;
  std::vector<ObjectTrack> objects;
  std::string text;
  std::vector<Segment> segments;

  int frames() const { return human.frames(); }
  double fps() const { return human.fps; }
  void validate() const;
};

/// Contiguous, ordered, non-overlapping and tiling [0, frames).
bool segments_tile(const std::vector<Segment>& segments, int frames);

/// Per-feature z-normalization. Object statistics are shared by all object
/// slots (width 9); standard deviations are floored at 1e-6.
struct NormStats {
  Vec human_mean;
  Vec human_std;
  Vec object_mean;
  Vec object_std;

  Mat normalize_human(const Mat& features) const;
  Mat denormalize_human(const Mat& features) const;
  /// T x (N_o * 9).
  Mat normalize_objects(const Mat& features) const;
  Mat denormalize_objects(const Mat& features) const;
  /// Per-column std of the packed object block (used to map gradients).
  Vec object_std_packed(int num_objects) const;
  bool empty() const { return human_mean.size() == 0; }
};

inline constexpr double kStdFloor = 1e-6;

}  // namespace himo
