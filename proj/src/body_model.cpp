#include "himo/body_model.hpp"

#include <cmath>

namespace himo {

Vec BodyParams::pack() const {
  Vec v(kSize);
  v.head(kPoseSize) = pack_pose();
  v.tail(kShapeDims) = shape;
  return v;
}

BodyParams BodyParams::unpack(const Vec& v) {
  require(v.size() == kSize, ErrorCode::kShapeMismatch, "BodyParams::unpack: wrong size");
  BodyParams p;
  p.unpack_pose(v.head(kPoseSize));
  p.shape = v.tail(kShapeDims);
  return p;
}

Vec BodyParams::pack_pose() const {
  Vec v(kPoseSize);
  int o = 0;
  v.segment<3>(o) = global_orient;
  o += 3;
  for (int j = 0; j < kBodyPoseJoints; ++j, o += 3) v.segment<3>(o) = body_pose.row(j).transpose();
  for (int j = 0; j < kHandPoseJoints; ++j, o += 3) v.segment<3>(o) = hand_pose.row(j).transpose();
  v.segment<3>(o) = translation;
  return v;
}

void BodyParams::unpack_pose(const Vec& v) {
  require(v.size() == kPoseSize, ErrorCode::kShapeMismatch, "BodyParams::unpack_pose: wrong size");
  int o = 0;
  global_orient = v.segment<3>(o);
  o += 3;
  for (int j = 0; j < kBodyPoseJoints; ++j, o += 3) body_pose.row(j) = v.segment<3>(o).transpose();
  for (int j = 0; j < kHandPoseJoints; ++j, o += 3) hand_pose.row(j) = v.segment<3>(o).transpose();
  translation = v.segment<3>(o);
}

void BodyParams::canonicalize() {
  global_orient = canonical_axis_angle(global_orient);
  for (int j = 0; j < kBodyPoseJoints; ++j)
    body_pose.row(j) = canonical_axis_angle(body_pose.row(j).transpose()).transpose();
  for (int j = 0; j < kHandPoseJoints; ++j)
    hand_pose.row(j) = canonical_axis_angle(hand_pose.row(j).transpose()).transpose();
}

bool BodyParams::finite() const {
  return global_orient.allFinite() && body_pose.allFinite() && hand_pose.allFinite() &&
         translation.allFinite() && shape.allFinite();
}

// ---------------------------------------------------------------------------

ToyBodyModel::ToyBodyModel() {
  parents_ = {-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};
  offsets_ = {
      {0.0, 0.95, 0.0},                                                         // pelvis (rest root)
      {0.08, -0.08, 0.0},  {-0.08, -0.08, 0.0}, {0.0, 0.10, 0.0},              // hips, spine1
      {0.0, -0.40, 0.0},   {0.0, -0.40, 0.0},   {0.0, 0.14, 0.0},              // knees, spine2
      {0.0, -0.42, 0.0},   {0.0, -0.42, 0.0},   {0.0, 0.06, 0.0},              // ankles, spine3
      {0.0, -0.06, 0.12},  {0.0, -0.06, 0.12},  {0.0, 0.16, 0.0},              // feet, neck
      {0.07, 0.12, 0.0},   {-0.07, 0.12, 0.0},  {0.0, 0.14, 0.03},             // collars, head
      {0.10, 0.0, 0.0},    {-0.10, 0.0, 0.0},                                  // shoulders
      {0.28, 0.0, 0.0},    {-0.28, 0.0, 0.0},                                  // elbows
      {0.26, 0.0, 0.0},    {-0.26, 0.0, 0.0},                                  // wrists
      {0.09, 0.0, 0.0},    {-0.09, 0.0, 0.0},                                  // hands
  };
  radii_ = {0.0,  0.09, 0.09, 0.11, 0.07, 0.07, 0.11, 0.05, 0.05, 0.11, 0.04, 0.04,
            0.05, 0.05, 0.05, 0.09, 0.05, 0.05, 0.045, 0.045, 0.035, 0.035, 0.03, 0.03};

  shape_dirs_ = Mat::Zero(num_joints(), kShapeDims);
  shape_dirs_.col(0).setConstant(0.04);
  for (int j : {0, 1, 2, 4, 5, 7, 8, 10, 11}) shape_dirs_(j, 2) = 0.03;
  for (int j : {16, 17, 18, 19, 20, 21, 22, 23}) shape_dirs_(j, 3) = 0.03;
  for (int j : {3, 6, 9, 12, 15}) shape_dirs_(j, 4) = 0.03;
  for (int j : {1, 2, 13, 14}) shape_dirs_(j, 5) = 0.05;
}

Vec3 ToyBodyModel::rotation_vector(const BodyParams& params, int joint) const {
  if (joint == 0) return params.global_orient;
  if (joint <= kBodyPoseJoints) return params.body_pose.row(joint - 1).transpose();
  return params.hand_pose.row(joint == kLeftHand ? 0 : 15).transpose();
}

void ToyBodyModel::set_rotation_vector(BodyParams& params, int joint, const Vec3& aa) const {
  require(joint >= 0 && joint < num_joints(), ErrorCode::kOutOfRange, "toy model: joint index");
  if (joint == 0) {
    params.global_orient = aa;
  } else if (joint <= kBodyPoseJoints) {
    params.body_pose.row(joint - 1) = aa.transpose();
  } else {
    params.hand_pose.row(joint == kLeftHand ? 0 : 15) = aa.transpose();
  }
}

Mat3 ToyBodyModel::local_rotation(const BodyParams& params, int joint) const {
  return axis_angle_to_matrix(rotation_vector(params, joint));
}

BodyState ToyBodyModel::forward_state(const BodyParams& params) const {
  require(params.shape.size() == kShapeDims, ErrorCode::kShapeMismatch, "toy model: shape size");
  const int nj = num_joints();
  BodyState s;
  s.joints.resize(nj, 3);
  s.local.resize(nj);
  s.global.resize(nj);
  s.bones.resize(nj);
  for (int j = 0; j < nj; ++j) {
    const double scale = 1.0 + shape_dirs_.row(j).dot(params.shape);
    s.bones[j] = offsets_[j] * scale;
    s.local[j] = local_rotation(params, j);
    const int p = parents_[j];
    if (p < 0) {
      s.global[j] = s.local[j];
      s.joints.row(j) = (s.bones[j] + params.translation).transpose();
    } else {
      s.global[j] = s.global[p] * s.local[j];
      s.joints.row(j) = s.joints.row(p) + (s.global[p] * s.bones[j]).transpose();
    }
  }
  return s;
}

BodyParams ToyBodyModel::backward(const BodyParams& params, const BodyState& s,
                                  const Mat& grad_joints) const {
  const int nj = num_joints();
  require(grad_joints.rows() == nj && grad_joints.cols() == 3, ErrorCode::kShapeMismatch,
          "toy model backward: gradient must be J x 3");
  std::vector<Vec3> gp(nj);
  std::vector<Mat3> gg(nj, Mat3::Zero());
  for (int j = 0; j < nj; ++j) gp[j] = grad_joints.row(j).transpose();

  BodyParams grad;
  grad.shape.setZero();
  for (int j = nj - 1; j >= 0; --j) {
    const int p = parents_[j];
    Mat3 g_local;
    Vec3 g_bone;
    if (p < 0) {
      grad.translation += gp[j];
      g_bone = gp[j];
      g_local = gg[j];
    } else {
      gp[p] += gp[j];
      gg[p] += gp[j] * s.bones[j].transpose();
      gg[p] += gg[j] * s.local[j].transpose();
      g_bone = s.global[p].transpose() * gp[j];
      g_local = s.global[p].transpose() * gg[j];
    }
    grad.shape += g_bone.dot(offsets_[j]) * shape_dirs_.row(j).transpose();

    const auto dr = axis_angle_derivatives(rotation_vector(params, j));
    Vec3 g_aa;
    for (int k = 0; k < 3; ++k) g_aa[k] = (g_local.array() * dr[k].array()).sum();
    if (j == 0) {
      grad.global_orient += g_aa;
    } else if (j <= kBodyPoseJoints) {
      grad.body_pose.row(j - 1) += g_aa.transpose();
    } else {
      grad.hand_pose.row(j == kLeftHand ? 0 : 15) += g_aa.transpose();
    }
  }
  return grad;
}

Vec shape_from_stature(double height_m, double weight_kg) {
  require(height_m > 0.5 && height_m < 2.5 && weight_kg > 10.0, ErrorCode::kInvalidArgument,
          "shape_from_stature: implausible stature");
  Vec beta = Vec::Zero(kShapeDims);
  beta[0] = (height_m / 1.70 - 1.0) / 0.04;
  beta[1] = (weight_kg / (height_m * height_m) - 22.0) / 4.0;
  return beta;
}

}  // namespace himo
