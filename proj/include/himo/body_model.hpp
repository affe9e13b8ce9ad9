#pragma once

#include <string>
#include <vector>

#include "himo/motion_repr.hpp"

namespace himo {

inline constexpr int kBodyPoseJoints = 21;
inline constexpr int kHandPoseJoints = 30;
inline constexpr int kShapeDims = 10;

/// Parametric body state for one frame. Rotations are axis-angle.
struct BodyParams {
  Vec3 global_orient = Vec3::Zero();
  Mat body_pose = Mat::Zero(kBodyPoseJoints, 3);
  Mat hand_pose = Mat::Zero(kHandPoseJoints, 3);
  Vec3 translation = Vec3::Zero();
  Vec shape = Vec::Zero(kShapeDims);

  static constexpr int kPoseSize = 3 + 3 * kBodyPoseJoints + 3 * kHandPoseJoints + 3;
  static constexpr int kSize = kPoseSize + kShapeDims;

  /// [global_orient, body_pose, hand_pose, translation, shape].
  Vec pack() const;
  static BodyParams unpack(const Vec& v);
  /// Read-write access to the pose part, excluding shape.
  Vec pack_pose() const;
  void unpack_pose(const Vec& v);

  /// Maps every rotation vector into [0, pi).
  void canonicalize();
  bool finite() const;
};

struct BodyState {
  Mat joints;                   // J x 3
  std::vector<Mat3> local;      // per-joint local rotation
  std::vector<Mat3> global;     // per-joint accumulated rotation
  std::vector<Vec3> bones;      // shape-scaled offset from parent
};

/// Forward-kinematics body model. Implementations must be differentiable:
/// `backward` maps dL/djoints to dL/dparams (all fields, including shape).
class BodyModel {
 public:
  virtual ~BodyModel() = default;

  virtual std::string name() const = 0;
  virtual int num_joints() const = 0;
  virtual const std::vector<int>& parents() const = 0;
  /// Per-joint radius of the capsule spanning parent->joint (0 for the root).
  virtual const std::vector<double>& capsule_radii() const = 0;

  virtual BodyState forward_state(const BodyParams& params) const = 0;
  Mat forward(const BodyParams& params) const { return forward_state(params).joints; }
  virtual BodyParams backward(const BodyParams& params, const BodyState& state,
                              const Mat& grad_joints) const = 0;
  /// Writes the axis-angle local rotation of `joint` into its parameter slot.
  virtual void set_rotation_vector(BodyParams& params, int joint, const Vec3& aa) const = 0;
};

/// 24-joint kinematic tree: pelvis, 21 body joints in SMPL ordering and one
/// hand joint per wrist. Hand joints take the first finger rotation of each
/// hand; the remaining finger angles do not move any toy joint.
class ToyBodyModel final : public BodyModel {
 public:
  ToyBodyModel();

  std::string name() const override { return "toy"; }
  int num_joints() const override { return static_cast<int>(parents_.size()); }
  const std::vector<int>& parents() const override { return parents_; }
  const std::vector<double>& capsule_radii() const override { return radii_; }

  BodyState forward_state(const BodyParams& params) const override;
  BodyParams backward(const BodyParams& params, const BodyState& state,
                      const Mat& grad_joints) const override;
  void set_rotation_vector(BodyParams& params, int joint, const Vec3& aa) const override;

  /// Rest offset of each joint from its parent (root: rest root position).
  const std::vector<Vec3>& rest_offsets() const { return offsets_; }
  static constexpr int kLeftWrist = 20, kRightWrist = 21, kLeftHand = 22, kRightHand = 23;
  static constexpr int kLeftShoulder = 16, kRightShoulder = 17, kLeftElbow = 18, kRightElbow = 19;
  static constexpr int kLeftCollar = 13, kRightCollar = 14;

 private:
  Mat3 local_rotation(const BodyParams& params, int joint) const;
  Vec3 rotation_vector(const BodyParams& params, int joint) const;

  std::vector<int> parents_;
  std::vector<Vec3> offsets_;
  std::vector<double> radii_;
  Mat shape_dirs_;  // J x 10, relative bone-length change per shape unit
};

/// Height (m) / weight (kg) to shape coefficients. Only height moves the toy
/// skeleton; weight is mapped to the second coefficient for completeness.
Vec shape_from_stature(double height_m, double weight_kg);

}  // namespace himo
