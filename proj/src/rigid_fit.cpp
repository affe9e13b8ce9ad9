#include "himo/rigid_fit.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace himo {

RigidPose rigid_pose_from_markers(const Mat& rest, const Mat& observed) {
  require(rest.cols() == 3 && observed.cols() == 3 && rest.rows() == observed.rows(),
          ErrorCode::kShapeMismatch, "rigid_pose_from_markers: expected matching M x 3 inputs");
  require(rest.rows() >= 3, ErrorCode::kDegenerateGeometry,
          "rigid_pose_from_markers: need at least 3 markers");
  require(rest.allFinite() && observed.allFinite(), ErrorCode::kInvalidArgument,
          "rigid_pose_from_markers: non-finite input");

  const Vec3 mu_r = rest.colwise().mean().transpose();
  const Vec3 mu_o = observed.colwise().mean().transpose();
  const Mat cr = rest.rowwise() - mu_r.transpose();
  const Mat co = observed.rowwise() - mu_o.transpose();

  const Eigen::JacobiSVD<Mat> shape_svd(cr);
  const Vec sv = shape_svd.singularValues();
  if (sv[0] < 1e-12 || sv[1] < 1e-9 * sv[0])
    fail(ErrorCode::kDegenerateGeometry, "rigid_pose_from_markers: markers are collinear");

  const Mat3 h = cr.transpose() * co;
  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;

  RigidPose pose;
  pose.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  pose.translation = mu_o - pose.rotation * mu_r;
  const Mat pred = (rest * pose.rotation.transpose()).rowwise() + pose.translation.transpose();
  pose.residual = std::sqrt((pred - observed).rowwise().squaredNorm().mean());
  return pose;
}

Vec3 calibrate_centroid_bias(const Mat& marker_rest, const Vec3& centroid) {
  require(marker_rest.rows() >= 1 && marker_rest.cols() == 3, ErrorCode::kShapeMismatch,
          "calibrate_centroid_bias: expected M x 3 markers");
  return centroid - marker_rest.colwise().mean().transpose();
}

Vec3 object_centroid(const Mat& observed, const Mat3& rotation, const Vec3& bias) {
  return observed.colwise().mean().transpose() + rotation * bias;
}

RigidTrack track_rigid_object(const Mat& marker_rest, const std::vector<Mat>& observed,
                              const Vec3& object_centroid_rest) {
  const Vec3 bias = calibrate_centroid_bias(marker_rest, object_centroid_rest);
  RigidTrack track;
  for (const Mat& frame : observed) {
    const RigidPose pose = rigid_pose_from_markers(marker_rest, frame);
    track.rotations.push_back(pose.rotation);
    track.centroids.push_back(object_centroid(frame, pose.rotation, bias));
    track.residuals.push_back(pose.residual);
  }
  return track;
}

// ---------------------------------------------------------------------------

namespace {

void check_sequence(const BodyModel& model, const ParamsSeq& params,
                    const std::vector<Mat>& targets) {
  require(params.size() == targets.size(), ErrorCode::kShapeMismatch,
          "joint_energy: parameter and target sequence lengths differ");
  for (const Mat& t : targets) {
    require(t.rows() == model.num_joints() && t.cols() == 3, ErrorCode::kShapeMismatch,
            "joint_energy: targets must be J x 3 per frame");
    require(t.allFinite(), ErrorCode::kInvalidArgument, "joint_energy: non-finite targets");
  }
}

void add_into(BodyParams& acc, const BodyParams& g, double scale) {
  acc.global_orient += scale * g.global_orient;
  acc.body_pose += scale * g.body_pose;
  acc.hand_pose += scale * g.hand_pose;
  acc.translation += scale * g.translation;
  acc.shape += scale * g.shape;
}

ParamsSeq zeros_like(const ParamsSeq& params) {
  ParamsSeq z(params.size());
  return z;
}

}  // namespace

double joint_energy(const BodyModel& model, const ParamsSeq& params,
                    const std::vector<Mat>& targets, ParamsSeq* grad, const Vec* joint_weights) {
  check_sequence(model, params, targets);
  if (joint_weights)
    require(joint_weights->size() == model.num_joints(), ErrorCode::kShapeMismatch,
            "joint_energy: joint weight count differs from J");
  if (grad) grad->resize(params.size());
  double e = 0.0;
  for (std::size_t n = 0; n < params.size(); ++n) {
    const BodyState s = model.forward_state(params[n]);
    Mat diff = s.joints - targets[n];
    if (joint_weights) diff.array().colwise() *= joint_weights->array().sqrt();
    e += diff.squaredNorm();
    if (grad) {
      Mat g = 2.0 * diff;
      if (joint_weights) g.array().colwise() *= joint_weights->array().sqrt();
      add_into((*grad)[n], model.backward(params[n], s, g), 1.0);
    }
  }
  return e;
}

double smooth_energy(const BodyModel& model, const ParamsSeq& params, ParamsSeq* grad) {
  if (grad) grad->resize(params.size());
  if (params.size() < 2) return 0.0;
  std::vector<BodyState> states;
  states.reserve(params.size());
  for (const auto& p : params) states.push_back(model.forward_state(p));
  std::vector<Mat> gj(params.size(), Mat::Zero(model.num_joints(), 3));
  double e = 0.0;
  for (std::size_t n = 0; n + 1 < params.size(); ++n) {
    const Mat d = states[n + 1].joints - states[n].joints;
    e += d.squaredNorm();
    gj[n + 1] += 2.0 * d;
    gj[n] -= 2.0 * d;
  }
  if (grad)
    for (std::size_t n = 0; n < params.size(); ++n)
      add_into((*grad)[n], model.backward(params[n], states[n], gj[n]), 1.0);
  return e;
}

double reg_energy(const BodyParams& params, BodyParams* grad) {
  if (grad) {
    grad->body_pose += 2.0 * params.body_pose;
    grad->hand_pose += 2.0 * params.hand_pose;
  }
  return params.body_pose.squaredNorm() + params.hand_pose.squaredNorm();
}

double reg_energy(const ParamsSeq& params, ParamsSeq* grad) {
  if (grad) grad->resize(params.size());
  double e = 0.0;
  for (std::size_t n = 0; n < params.size(); ++n)
    e += reg_energy(params[n], grad ? &(*grad)[n] : nullptr);
  return e;
}

EnergyBreakdown total_energy(const BodyModel& model, const ParamsSeq& params,
                             const std::vector<Mat>& targets, const EnergyWeights& w,
                             ParamsSeq* grad, const Vec* joint_weights) {
  EnergyBreakdown b;
  ParamsSeq gj, gs, gr;
  b.joint = joint_energy(model, params, targets, grad ? &gj : nullptr, joint_weights);
  b.smooth = smooth_energy(model, params, grad ? &gs : nullptr);
  b.reg = reg_energy(params, grad ? &gr : nullptr);
  b.total = w.joint * b.joint + w.smooth * b.smooth + w.reg * b.reg;
  if (grad) {
    *grad = zeros_like(params);
    for (std::size_t n = 0; n < params.size(); ++n) {
      add_into((*grad)[n], gj[n], w.joint);
      add_into((*grad)[n], gs[n], w.smooth);
      add_into((*grad)[n], gr[n], w.reg);
    }
  }
  return b;
}

namespace {

// Smallest rotation taking direction a onto direction b.
Mat3 swing(const Vec3& a, const Vec3& b) {
  const Vec3 u = a.normalized(), v = b.normalized();
  const Vec3 axis = u.cross(v);
  const double s = axis.norm(), c = u.dot(v);
  if (s < 1e-12) {
    if (c > 0.0) return Mat3::Identity();
    Vec3 perp = u.unitOrthogonal();
    return Eigen::AngleAxisd(std::numbers::pi, perp).toRotationMatrix();
  }
  return Eigen::AngleAxisd(std::atan2(s, c), axis / s).toRotationMatrix();
}

}  // namespace

BodyParams ik_initial_pose(const BodyModel& model, const Mat& target, const Vec& shape) {
  const int nj = model.num_joints();
  require(target.rows() == nj && target.cols() == 3 && target.allFinite(), ErrorCode::kShapeMismatch,
          "ik_initial_pose: target must be finite J x 3");
  const auto& parents = model.parents();
  BodyParams p;
  p.shape = shape;
  const BodyState rest = model.forward_state(p);
  std::vector<std::vector<int>> children(static_cast<std::size_t>(nj));
  for (int j = 0; j < nj; ++j) {
    require(parents[j] < j, ErrorCode::kInvalidArgument, "ik_initial_pose: joints must follow their parents");
    if (parents[j] >= 0) children[static_cast<std::size_t>(parents[j])].push_back(j);
  }
  std::vector<Mat3> global(static_cast<std::size_t>(nj), Mat3::Identity());
  for (int j = 0; j < nj; ++j) {
    const auto& kids = children[static_cast<std::size_t>(j)];
    const Mat3 up = parents[j] < 0 ? Mat3::Identity() : global[static_cast<std::size_t>(parents[j])];
    Mat3 local = Mat3::Identity();
    if (kids.size() == 1) {
      const int c = kids.front();
      local = swing(rest.bones[c], up.transpose() * (target.row(c) - target.row(j)).transpose());
    } else if (kids.size() > 1) {
      // Rotation-only Kabsch over the child bones.
      Mat3 h = Mat3::Zero();
      for (int c : kids) h += rest.bones[c] * ((target.row(c) - target.row(j)) * up);
      const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
      Mat3 d = Mat3::Identity();
      d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
      local = svd.matrixV() * d * svd.matrixU().transpose();
    }
    global[static_cast<std::size_t>(j)] = up * local;
    model.set_rotation_vector(p, j, matrix_to_axis_angle(local));
  }
  p.translation = target.row(0).transpose() - rest.bones[0];
  p.canonicalize();
  return p;
}

FitResult fit_body(const std::vector<Mat>& targets, const BodyModel& model,
                   const FitConfig& config) {
  require(!targets.empty(), ErrorCode::kInvalidArgument, "fit_body: no target frames");
  const std::size_t n = targets.size();
  const Vec* joint_weights = config.joint_weights.size() ? &config.joint_weights : nullptr;

  ParamsSeq params;
  if (!config.init.empty()) {
    require(config.init.size() == n, ErrorCode::kShapeMismatch,
            "fit_body: warm start length differs from targets");
    params = config.init;
  } else {
    const Vec beta = shape_from_stature(config.height_m, config.weight_kg);
    check_sequence(model, ParamsSeq(n), targets);
    params.reserve(n);
    for (std::size_t i = 0; i < n; ++i) params.push_back(ik_initial_pose(model, targets[i], beta));
  }
  check_sequence(model, params, targets);

  const int dim = BodyParams::kPoseSize;
  Mat x(dim, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) x.col(static_cast<Eigen::Index>(i)) = params[i].pack_pose();
  Mat m1 = Mat::Zero(dim, x.cols()), m2 = Mat::Zero(dim, x.cols());
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-12;

  auto unpack = [&](const Mat& xs) {
    ParamsSeq p = params;
    for (std::size_t i = 0; i < n; ++i) p[i].unpack_pose(xs.col(static_cast<Eigen::Index>(i)));
    return p;
  };

  FitResult result;
  result.params = params;
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> best_history;
  for (int it = 0; it < config.max_iterations; ++it) {
    ParamsSeq current = unpack(x);
    ParamsSeq grad;
    const EnergyBreakdown e =
        total_energy(model, current, targets, config.weights, &grad, joint_weights);
    require(std::isfinite(e.total), ErrorCode::kNumerical, "fit_body: energy is not finite");
    result.history.push_back(e.total);
    result.iterations = it + 1;
    if (e.total < best) {
      best = e.total;
      result.params = current;
      result.energy = e;
    }
    best_history.push_back(best);
    const int w = config.tolerance_window;
    if (it >= w) {
      const double before = best_history[static_cast<std::size_t>(it - w)];
      // A stalled best only counts once the iterate is back at it; early
      // Adam steps can overshoot a good warm start.
      const bool settled = e.total - best <= config.rel_tolerance * std::abs(best);
      if (settled && before - best <= config.rel_tolerance * std::abs(before)) {
        result.converged = true;
        break;
      }
    }

    const double progress = static_cast<double>(it) / std::max(1, config.max_iterations - 1);
    const double lr = config.learning_rate *
                      (config.final_lr_fraction +
                       (1.0 - config.final_lr_fraction) * 0.5 *
                           (1.0 + std::cos(std::numbers::pi * progress)));
    const double c1 = 1.0 - std::pow(kBeta1, it + 1), c2 = 1.0 - std::pow(kBeta2, it + 1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto col = static_cast<Eigen::Index>(i);
      const Vec g = grad[i].pack_pose();
      m1.col(col) = kBeta1 * m1.col(col) + (1.0 - kBeta1) * g;
      m2.col(col) = kBeta2 * m2.col(col) + (1.0 - kBeta2) * g.cwiseAbs2();
      x.col(col).array() -=
          lr * (m1.col(col).array() / c1) / ((m2.col(col).array() / c2).sqrt() + kEps);
    }
  }
  for (auto& p : result.params) p.canonicalize();
  return result;
}

}  // namespace himo
