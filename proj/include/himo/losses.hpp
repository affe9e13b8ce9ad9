#pragma once

#include <vector>

#include "himo/motion_repr.hpp"

namespace himo {

struct LossWeights {
  double vel = 1.0;
  double pos = 1.0;
  double pen = 1.0;
  double dis = 0.1;
};

struct LossParts {
  double vel = 0.0;
  double pos = 0.0;
  double pen = 0.0;
  double dis = 0.0;
};

double total_loss(const LossParts& parts, const LossWeights& weights = {});

/// Joint sequences are N x 3J (joint j in columns 3j..3j+2). `mask` has one
/// entry per frame (1 valid, 0 padded); an empty mask means all valid.
/// `grad` (optional) receives dL/dpred.
double loss_pos(const Mat& pred, const Mat& gt, const Vec& mask = {}, Mat* grad = nullptr);
/// Mean over valid consecutive frame pairs of the squared velocity residual,
/// summed over joints. Returns 0 when fewer than two frames are valid.
double loss_vel(const Mat& pred, const Mat& gt, const Vec& mask = {}, Mat* grad = nullptr);

// ---------------------------------------------------------------------------
// Penetration field

struct Capsule {
  Vec3 a;
  Vec3 b;
  double radius = 0.0;
};

/// Distance from p to the capsule surface (negative inside).
double capsule_sdf(const Capsule& c, const Vec3& p);

/// phi = -min(SDF, 0) on an n^3 voxel-center lattice. Voxel (i, j, k) sits at
/// origin + cell * (i, j, k). Values are evaluated on first access unless the
/// grid was materialized.
class SdfGrid {
 public:
  SdfGrid() = default;
  SdfGrid(std::vector<Capsule> capsules, Vec3 origin, double cell, int n);
  /// Tabulated field, values[(i * n + j) * n + k]; no capsules behind it.
  static SdfGrid from_values(Vec3 origin, double cell, int n, std::vector<double> values);

  int resolution() const { return n_; }
  const Vec3& origin() const { return origin_; }
  double cell() const { return cell_; }
  Vec3 center(int i, int j, int k) const { return origin_ + cell_ * Vec3(i, j, k); }
  double value(int i, int j, int k) const;
  void materialize() const;
  const std::vector<Capsule>& capsules() const { return capsules_; }
  int frame = 0;

 private:
  std::vector<Capsule> capsules_;
  Vec3 origin_ = Vec3::Zero();
  double cell_ = 1.0;
  int n_ = 0;
  mutable std::vector<double> values_;  // NaN = not yet evaluated
};

inline constexpr int kSdfResolution = 32;
inline constexpr double kSdfPadding = 0.10;

/// Capsules along every parent->joint bone of one frame (J x 3 joints).
std::vector<Capsule> body_capsules(const Mat& joints, const std::vector<int>& parents,
                                   const std::vector<double>& radii);

/// Grid over the capsule-union bounding box padded by `padding`, cubic cells.
/// Throws kDegenerateGeometry when every bone has zero length.
SdfGrid body_sdf_grid(const Mat& joints, const std::vector<int>& parents,
                      const std::vector<double>& radii, int n = kSdfResolution,
                      double padding = kSdfPadding, bool materialize = true);

/// Trilinear interpolation of phi; points outside the lattice give 0.
/// `grad` (optional, S x 3) receives d(value)/d(point).
Vec trilinear_sample(const SdfGrid& grid, const Mat& points, Mat* grad = nullptr);

// ---------------------------------------------------------------------------
// Object losses

/// One object's pose sequence: N x 6 rotations and N x 3 translations.
struct ObjectPoses {
  Mat rotation;
  Mat translation;
};

/// World points R(r_t) * samples + T_t for one frame.
Mat posed_points(const ObjectPoses& poses, int frame, const Mat& samples);

/// Mean over valid frames of the summed phi over all objects' posed samples.
/// `samples[o]` is object-local (S_o x 3); `grids[t]` is the body field at frame t.
double loss_pen(const std::vector<ObjectPoses>& pred, const std::vector<Mat>& samples,
                const std::vector<SdfGrid>& grids, const Vec& mask = {},
                std::vector<ObjectPoses>* grad = nullptr);

/// Mean over object pairs (i<j), valid frames and sample indices k of
/// (|v_ik - v_jk|^2 - |v*_ik - v*_jk|^2)^2, with v from `pred` and v* from `gt`.
double loss_dis(const std::vector<ObjectPoses>& pred, const std::vector<ObjectPoses>& gt,
                const std::vector<Mat>& samples, const Vec& mask = {},
                std::vector<ObjectPoses>* grad = nullptr);

}  // namespace himo
