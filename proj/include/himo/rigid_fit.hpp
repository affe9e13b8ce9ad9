#pragma once

#include <vector>

#include "himo/body_model.hpp"

namespace himo {

// ---------------------------------------------------------------------------
// Rigid objects

struct RigidPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double residual = 0.0;  // RMS marker error
};

/// Least-squares R, t with R * rest_i + t ~ observed_i (SVD Procrustes, det R = +1).
/// Needs at least three non-collinear markers.
RigidPose rigid_pose_from_markers(const Mat& rest_markers, const Mat& observed);

/// Offset from the marker centroid to the object centroid in the rest frame.
Vec3 calibrate_centroid_bias(const Mat& marker_rest, const Vec3& object_centroid);

/// Object centroid for one tracked frame: marker centroid plus the rotated bias.
Vec3 object_centroid(const Mat& observed, const Mat3& rotation, const Vec3& bias);

struct RigidTrack {
  std::vector<Mat3> rotations;
  std::vector<Vec3> centroids;
  std::vector<double> residuals;
};

/// Per-frame pose recovery plus centroid post-calibration.
RigidTrack track_rigid_object(const Mat& marker_rest, const std::vector<Mat>& observed,
                              const Vec3& object_centroid_rest);

// ---------------------------------------------------------------------------
// Articulated fitting

struct EnergyWeights {
  double joint = 1.0;
  double smooth = 0.1;
  double reg = 0.01;
};

struct EnergyBreakdown {
  double joint = 0.0;
  double smooth = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

using ParamsSeq = std::vector<BodyParams>;

/// Sum over frames and joints of squared joint error. `joint_weights` (size J,
/// optional) zeroes joints without observations. Accumulates into `grad` if set.
double joint_energy(const BodyModel& model, const ParamsSeq& params,
                    const std::vector<Mat>& targets, ParamsSeq* grad = nullptr,
                    const Vec* joint_weights = nullptr);

/// Sum of squared joint displacement between consecutive frames; 0 when N < 2.
double smooth_energy(const BodyModel& model, const ParamsSeq& params, ParamsSeq* grad = nullptr);

/// ||body_pose||^2 + ||hand_pose||^2 for one frame.
double reg_energy(const BodyParams& params, BodyParams* grad = nullptr);
double reg_energy(const ParamsSeq& params, ParamsSeq* grad = nullptr);

EnergyBreakdown total_energy(const BodyModel& model, const ParamsSeq& params,
                             const std::vector<Mat>& targets, const EnergyWeights& weights,
                             ParamsSeq* grad = nullptr, const Vec* joint_weights = nullptr);

struct FitConfig {
  EnergyWeights weights;
  int max_iterations = 500;
  double learning_rate = 0.02;
  double final_lr_fraction = 0.005;
  double rel_tolerance = 1e-7;
  int tolerance_window = 10;
  double height_m = 1.70;
  double weight_kg = 65.0;
  /// Optional warm start; when empty each frame starts from ik_initial_pose.
  ParamsSeq init;
  Vec joint_weights;  // empty = all ones
};

struct FitResult {
  ParamsSeq params;
  EnergyBreakdown energy;
  int iterations = 0;
  bool converged = false;
  std::vector<double> history;
};

/// Analytic per-frame pose: each joint takes the local rotation that best
/// aligns its rest child bones with the target bones (minimal swing for one
/// child, rotation-only Kabsch for several). Exact for reachable targets.
BodyParams ik_initial_pose(const BodyModel& model, const Mat& target, const Vec& shape);

/// Adam minimization of alpha E_j + lambda E_s + gamma E_r over pose and
/// translation; shape is fixed from the stature heuristic (or the warm
/// start). Returns the best iterate seen.
FitResult fit_body(const std::vector<Mat>& targets, const BodyModel& model,
                   const FitConfig& config = {});

}  // namespace himo
