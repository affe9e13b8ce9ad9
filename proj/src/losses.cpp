#include "himo/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>

namespace himo {

double total_loss(const LossParts& p, const LossWeights& w) {
  require(w.vel >= 0 && w.pos >= 0 && w.pen >= 0 && w.dis >= 0, ErrorCode::kInvalidArgument,
          "loss weights must be non-negative");
  return w.vel * p.vel + w.pos * p.pos + w.pen * p.pen + w.dis * p.dis;
}

namespace {

Vec frame_mask(const Vec& mask, Eigen::Index frames, const char* who) {
  if (mask.size() == 0) return Vec::Ones(frames);
  require(mask.size() == frames, ErrorCode::kShapeMismatch,
          std::string(who) + ": mask length differs from frame count");
  return mask;
}

void check_joint_pair(const Mat& pred, const Mat& gt, const char* who) {
  require(pred.rows() == gt.rows() && pred.cols() == gt.cols() && pred.cols() % 3 == 0,
          ErrorCode::kShapeMismatch, std::string(who) + ": expected matching N x 3J inputs");
}

}  // namespace

double loss_pos(const Mat& pred, const Mat& gt, const Vec& mask_in, Mat* grad) {
  check_joint_pair(pred, gt, "loss_pos");
  const Vec mask = frame_mask(mask_in, pred.rows(), "loss_pos");
  const double count = mask.sum();
  if (grad) *grad = Mat::Zero(pred.rows(), pred.cols());
  if (count <= 0.0) return 0.0;
  const Mat diff = pred - gt;
  const Vec per_frame = diff.rowwise().squaredNorm();
  if (grad) *grad = (2.0 / count) * (diff.array().colwise() * mask.array()).matrix();
  return mask.dot(per_frame) / count;
}

double loss_vel(const Mat& pred, const Mat& gt, const Vec& mask_in, Mat* grad) {
  check_joint_pair(pred, gt, "loss_vel");
  const Vec mask = frame_mask(mask_in, pred.rows(), "loss_vel");
  if (grad) *grad = Mat::Zero(pred.rows(), pred.cols());
  const Eigen::Index n = pred.rows();
  if (n < 2) {
    std::clog << "warning: loss_vel needs at least two frames, returning 0\n";
    return 0.0;
  }
  const Vec pair = mask.head(n - 1).cwiseProduct(mask.tail(n - 1));
  const double count = pair.sum();
  if (count <= 0.0) return 0.0;
  const Mat r = (pred.bottomRows(n - 1) - pred.topRows(n - 1)) - (gt.bottomRows(n - 1) - gt.topRows(n - 1));
  if (grad) {
    const Mat g = (2.0 / count) * (r.array().colwise() * pair.array()).matrix();
    grad->bottomRows(n - 1) += g;
    grad->topRows(n - 1) -= g;
  }
  return pair.dot(r.rowwise().squaredNorm()) / count;
}

// ---------------------------------------------------------------------------

double capsule_sdf(const Capsule& c, const Vec3& p) {
  const Vec3 ab = c.b - c.a;
  const double len2 = ab.squaredNorm();
  double s = len2 > 0.0 ? (p - c.a).dot(ab) / len2 : 0.0;
  s = std::clamp(s, 0.0, 1.0);
  return (p - (c.a + s * ab)).norm() - c.radius;
}

SdfGrid::SdfGrid(std::vector<Capsule> capsules, Vec3 origin, double cell, int n)
    : capsules_(std::move(capsules)), origin_(origin), cell_(cell), n_(n) {
  require(n >= 2 && cell > 0.0, ErrorCode::kInvalidArgument, "SdfGrid: bad lattice");
  values_.assign(static_cast<std::size_t>(n) * n * n, std::numeric_limits<double>::quiet_NaN());
}

SdfGrid SdfGrid::from_values(Vec3 origin, double cell, int n, std::vector<double> values) {
  SdfGrid g({}, origin, cell, n);
  require(values.size() == g.values_.size(), ErrorCode::kShapeMismatch,
          "SdfGrid: expected n^3 values");
  g.values_ = std::move(values);
  return g;
}

double SdfGrid::value(int i, int j, int k) const {
  double& v = values_[(static_cast<std::size_t>(i) * n_ + j) * n_ + k];
  if (std::isnan(v)) {
    const Vec3 p = center(i, j, k);
    double sdf = std::numeric_limits<double>::infinity();
    for (const Capsule& c : capsules_) sdf = std::min(sdf, capsule_sdf(c, p));
    v = -std::min(sdf, 0.0);
  }
  return v;
}

void SdfGrid::materialize() const {
  for (int i = 0; i < n_; ++i)
    for (int j = 0; j < n_; ++j)
      for (int k = 0; k < n_; ++k) value(i, j, k);
}

std::vector<Capsule> body_capsules(const Mat& joints, const std::vector<int>& parents,
                                   const std::vector<double>& radii) {
  require(joints.cols() == 3 && joints.rows() == static_cast<Eigen::Index>(parents.size()) &&
              radii.size() == parents.size(),
          ErrorCode::kShapeMismatch, "body_capsules: joints, parents and radii disagree");
  require(joints.allFinite(), ErrorCode::kInvalidArgument, "body_capsules: non-finite joints");
  std::vector<Capsule> caps;
  for (std::size_t j = 0; j < parents.size(); ++j) {
    if (parents[j] < 0) continue;
    const Vec3 a = joints.row(parents[j]).transpose();
    const Vec3 b = joints.row(static_cast<Eigen::Index>(j)).transpose();
    if ((b - a).norm() < 1e-9) continue;
    caps.push_back({a, b, radii[j]});
  }
  require(!caps.empty(), ErrorCode::kDegenerateGeometry,
          "body_sdf_grid: every bone has zero length");
  return caps;
}

SdfGrid body_sdf_grid(const Mat& joints, const std::vector<int>& parents,
                      const std::vector<double>& radii, int n, double padding, bool materialize) {
  std::vector<Capsule> caps = body_capsules(joints, parents, radii);
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const Capsule& c : caps) {
    const Vec3 r = Vec3::Constant(c.radius);
    lo = lo.cwiseMin(c.a - r).cwiseMin(c.b - r);
    hi = hi.cwiseMax(c.a + r).cwiseMax(c.b + r);
  }
  lo.array() -= padding;
  hi.array() += padding;
  const double extent = (hi - lo).maxCoeff();
  const double cell = extent / (n - 1);
  const Vec3 origin = 0.5 * (lo + hi) - Vec3::Constant(0.5 * extent);
  SdfGrid grid(std::move(caps), origin, cell, n);
  if (materialize) grid.materialize();
  return grid;
}

Vec trilinear_sample(const SdfGrid& grid, const Mat& points, Mat* grad) {
  require(points.cols() == 3, ErrorCode::kShapeMismatch, "trilinear_sample: points must be S x 3");
  const int n = grid.resolution();
  Vec out = Vec::Zero(points.rows());
  if (grad) *grad = Mat::Zero(points.rows(), 3);
  for (Eigen::Index s = 0; s < points.rows(); ++s) {
    const Vec3 u = (points.row(s).transpose() - grid.origin()) / grid.cell();
    if (!u.allFinite()) {
      out[s] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    if ((u.array() < 0.0).any() || (u.array() > n - 1).any()) continue;
    int i0[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
      i0[a] = std::min(static_cast<int>(std::floor(u[a])), n - 2);
      f[a] = u[a] - i0[a];
    }
    double c[2][2][2];
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int d = 0; d < 2; ++d) c[a][b][d] = grid.value(i0[0] + a, i0[1] + b, i0[2] + d);
    const double fx = f[0], fy = f[1], fz = f[2];
    const double c00 = c[0][0][0] * (1 - fx) + c[1][0][0] * fx;
    const double c01 = c[0][0][1] * (1 - fx) + c[1][0][1] * fx;
    const double c10 = c[0][1][0] * (1 - fx) + c[1][1][0] * fx;
    const double c11 = c[0][1][1] * (1 - fx) + c[1][1][1] * fx;
    const double c0 = c00 * (1 - fy) + c10 * fy;
    const double c1 = c01 * (1 - fy) + c11 * fy;
    out[s] = c0 * (1 - fz) + c1 * fz;
    if (grad) {
      double gx = 0.0;
      for (int b = 0; b < 2; ++b)
        for (int d = 0; d < 2; ++d)
          gx += (c[1][b][d] - c[0][b][d]) * (b ? fy : 1 - fy) * (d ? fz : 1 - fz);
      const double gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz;
      const double gz = c1 - c0;
      grad->row(s) = Eigen::RowVector3d(gx, gy, gz) / grid.cell();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void check_poses(const std::vector<ObjectPoses>& poses, const std::vector<Mat>& samples,
                 const char* who) {
  require(poses.size() == samples.size(), ErrorCode::kShapeMismatch,
          std::string(who) + ": object and sample-set counts differ");
  for (std::size_t o = 0; o < poses.size(); ++o) {
    require(poses[o].rotation.cols() == 6 && poses[o].translation.cols() == 3 &&
                poses[o].rotation.rows() == poses[o].translation.rows() &&
                poses[o].rotation.rows() == poses[0].rotation.rows(),
            ErrorCode::kShapeMismatch, std::string(who) + ": object poses must be N x 6 / N x 3");
    require(samples[o].cols() == 3, ErrorCode::kShapeMismatch,
            std::string(who) + ": samples must be S x 3");
  }
}

Rot6d row6(const Mat& m, int t) { return m.row(t).transpose(); }

std::vector<ObjectPoses> zero_grads(const std::vector<ObjectPoses>& poses) {
  std::vector<ObjectPoses> g(poses.size());
  for (std::size_t o = 0; o < poses.size(); ++o) {
    g[o].rotation = Mat::Zero(poses[o].rotation.rows(), 6);
    g[o].translation = Mat::Zero(poses[o].translation.rows(), 3);
  }
  return g;
}

// Accumulates dL/d(points) (S x 3) of one frame into the pose gradient.
void pose_backward(const ObjectPoses& poses, int t, const Mat& samples, const Mat& gpoints,
                   ObjectPoses& g) {
  const Mat3 gr = gpoints.transpose() * samples;  // dL/dR
  g.translation.row(t) += gpoints.colwise().sum();
  g.rotation.row(t) += rot6d_to_matrix_vjp(row6(poses.rotation, t), gr).transpose();
}

}  // namespace

Mat posed_points(const ObjectPoses& poses, int frame, const Mat& samples) {
  const Mat3 r = rot6d_to_matrix_stable(row6(poses.rotation, frame));
  Mat p = samples * r.transpose();
  p.rowwise() += poses.translation.row(frame);
  return p;
}

double loss_pen(const std::vector<ObjectPoses>& pred, const std::vector<Mat>& samples,
                const std::vector<SdfGrid>& grids, const Vec& mask_in,
                std::vector<ObjectPoses>* grad) {
  check_poses(pred, samples, "loss_pen");
  if (grad) *grad = zero_grads(pred);
  if (pred.empty()) return 0.0;
  const int n = static_cast<int>(pred[0].rotation.rows());
  const Vec mask = frame_mask(mask_in, n, "loss_pen");
  const double count = mask.sum();
  if (count <= 0.0) return 0.0;
  double total = 0.0;
  for (int t = 0; t < n; ++t) {
    if (mask[t] == 0.0) continue;
    require(t < static_cast<int>(grids.size()), ErrorCode::kOutOfRange,
            "loss_pen: missing body field for frame " + std::to_string(t));
    for (std::size_t o = 0; o < pred.size(); ++o) {
      const Mat pts = posed_points(pred[o], t, samples[o]);
      Mat gp;
      const Vec phi = trilinear_sample(grids[static_cast<std::size_t>(t)], pts, grad ? &gp : nullptr);
      total += mask[t] * phi.sum();
      if (grad) pose_backward(pred[o], t, samples[o], (mask[t] / count) * gp, (*grad)[o]);
    }
  }
  return total / count;
}

double loss_dis(const std::vector<ObjectPoses>& pred, const std::vector<ObjectPoses>& gt,
                const std::vector<Mat>& samples, const Vec& mask_in,
                std::vector<ObjectPoses>* grad) {
  check_poses(pred, samples, "loss_dis");
  check_poses(gt, samples, "loss_dis");
  require(pred.size() >= 2, ErrorCode::kInvalidArgument, "loss_dis: needs at least two objects");
  const Eigen::Index s = samples[0].rows();
  for (const Mat& m : samples)
    require(m.rows() == s, ErrorCode::kShapeMismatch,
            "loss_dis: objects must share the sample count");
  const int n = static_cast<int>(pred[0].rotation.rows());
  require(gt[0].rotation.rows() == n, ErrorCode::kShapeMismatch, "loss_dis: frame counts differ");
  if (grad) *grad = zero_grads(pred);
  const Vec mask = frame_mask(mask_in, n, "loss_dis");
  const std::size_t no = pred.size();
  const double pairs = static_cast<double>(no * (no - 1) / 2);
  const double count = mask.sum() * pairs * static_cast<double>(s);
  if (count <= 0.0) return 0.0;
  double total = 0.0;
  std::vector<Mat> vp(no), vg(no), gp(no);
  for (int t = 0; t < n; ++t) {
    if (mask[t] == 0.0) continue;
    for (std::size_t o = 0; o < no; ++o) {
      vp[o] = posed_points(pred[o], t, samples[o]);
      vg[o] = posed_points(gt[o], t, samples[o]);
      gp[o] = Mat::Zero(s, 3);
    }
    for (std::size_t i = 0; i < no; ++i)
      for (std::size_t j = i + 1; j < no; ++j) {
        const Mat dp = vp[i] - vp[j];
        const Vec r = dp.rowwise().squaredNorm() - (vg[i] - vg[j]).rowwise().squaredNorm();
        total += mask[t] * r.squaredNorm();
        if (grad) {
          const Mat g = (4.0 * mask[t] / count) * (dp.array().colwise() * r.array()).matrix();
          gp[i] += g;
          gp[j] -= g;
        }
      }
    if (grad)
      for (std::size_t o = 0; o < no; ++o) pose_backward(pred[o], t, samples[o], gp[o], (*grad)[o]);
  }
  return total / count;
}

}  // namespace himo
