#include <gtest/gtest.h>

#include "himo/body_model.hpp"
#include "himo/losses.hpp"
#include "test_util.hpp"

namespace himo {
namespace {

Mat rot_rows(int n, Rng& rng) {
  Mat r(n, 6);
  for (int t = 0; t < n; ++t) r.row(t) = matrix_to_rot6d(random_rotation(rng)).transpose();
  return r;
}

/// Flattens poses to one column vector (rotation then translation per object).
Mat pack(const std::vector<ObjectPoses>& p) {
  std::vector<double> v;
  for (const auto& o : p) {
    for (Eigen::Index i = 0; i < o.rotation.size(); ++i) v.push_back(o.rotation.data()[i]);
    for (Eigen::Index i = 0; i < o.translation.size(); ++i) v.push_back(o.translation.data()[i]);
  }
  return Eigen::Map<Mat>(v.data(), static_cast<Eigen::Index>(v.size()), 1);
}

std::vector<ObjectPoses> unpack(const Mat& x, const std::vector<ObjectPoses>& like) {
  std::vector<ObjectPoses> p = like;
  Eigen::Index c = 0;
  for (auto& o : p) {
    for (Eigen::Index i = 0; i < o.rotation.size(); ++i) o.rotation.data()[i] = x(c++);
    for (Eigen::Index i = 0; i < o.translation.size(); ++i) o.translation.data()[i] = x(c++);
  }
  return p;
}

TEST(LossPos, HandWorkedValues) {
  Mat a = Mat::Zero(1, 3), b = Mat::Zero(1, 3);
  EXPECT_DOUBLE_EQ(loss_pos(a, a), 0.0);
  b(0, 0) = 1.0;
  EXPECT_DOUBLE_EQ(loss_pos(b, a), 1.0);
  // Masked frames contribute nothing.
  Mat p = Mat::Zero(2, 3), g = Mat::Zero(2, 3);
  p(1, 0) = 5.0;
  EXPECT_DOUBLE_EQ(loss_pos(p, g, (Vec(2) << 1, 0).finished()), 0.0);
}

TEST(LossVel, HandWorkedValues) {
  Rng rng(1);
  const Mat gt = test::random_mat(5, 6, rng);
  Mat shifted = gt;
  shifted.rowwise() += RowVec::Constant(6, 0.7);
  EXPECT_NEAR(loss_vel(shifted, gt), 0.0, 1e-24);
  Mat still = Mat::Zero(2, 3), moving = Mat::Zero(2, 3);
  moving(1, 0) = 0.1;
  EXPECT_NEAR(loss_vel(still, moving), 0.01, 1e-15);
  EXPECT_DOUBLE_EQ(loss_vel(Mat::Zero(1, 3), Mat::Zero(1, 3)), 0.0);
}

TEST(LossPosVel, GradientsMatchFiniteDifferences) {
  Rng rng(2);
  const Mat pred = test::random_mat(6, 9, rng), gt = test::random_mat(6, 9, rng);
  const Vec mask = (Vec(6) << 1, 1, 1, 0, 1, 1).finished();
  Mat gp, gv;
  loss_pos(pred, gt, mask, &gp);
  loss_vel(pred, gt, mask, &gv);
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const double fp = test::central_difference([&](const Mat& x) { return loss_pos(x, gt, mask); }, pred, i);
    const double fv = test::central_difference([&](const Mat& x) { return loss_vel(x, gt, mask); }, pred, i);
    EXPECT_LT(test::relative_error(gp.data()[i], fp), 1e-5);
    EXPECT_LT(test::relative_error(gv.data()[i], fv), 1e-5);
  }
}

TEST(LossWeights, Defaults) {
  const LossWeights w;
  EXPECT_EQ(w.vel, 1.0);
  EXPECT_EQ(w.pos, 1.0);
  EXPECT_EQ(w.pen, 1.0);
  EXPECT_EQ(w.dis, 0.1);
  EXPECT_DOUBLE_EQ(total_loss(LossParts{}), 0.0);
  EXPECT_NEAR(total_loss(LossParts{1, 1, 1, 1}), 3.1, 1e-15);
  EXPECT_DOUBLE_EQ(total_loss(LossParts{1, 1, 1, 1}, {1, 1, 1, 0}), 3.0);
}

// ---------------------------------------------------------------------------

TEST(CapsuleSdf, AnalyticValues) {
  const Capsule c{Vec3(0, 0, 0), Vec3(1, 0, 0), 0.2};
  EXPECT_NEAR(capsule_sdf(c, Vec3(0.5, 0, 0)), -0.2, 1e-15);
  EXPECT_NEAR(capsule_sdf(c, Vec3(0.5, 1, 0)), 0.8, 1e-15);
  EXPECT_NEAR(capsule_sdf(c, Vec3(-1, 0, 0)), 0.8, 1e-15);
  EXPECT_NEAR(capsule_sdf(c, Vec3(2, 0, 0)), 0.8, 1e-15);
}

TEST(SdfGrid, NonNegativeAndZeroOutside) {
  const ToyBodyModel m;
  const Mat j = m.forward(BodyParams{});
  const SdfGrid g = body_sdf_grid(j, m.parents(), m.capsule_radii(), 16);
  for (int a = 0; a < 16; ++a)
    for (int b = 0; b < 16; ++b)
      for (int c = 0; c < 16; ++c) EXPECT_GE(g.value(a, b, c), 0.0);
  EXPECT_EQ(g.value(0, 0, 0), 0.0);
  Mat far(1, 3);
  far << 10, 10, 10;
  EXPECT_EQ(trilinear_sample(g, far)(0), 0.0);
}

TEST(SdfGrid, LazyMatchesMaterialized) {
  const ToyBodyModel m;
  const Mat j = m.forward(BodyParams{});
  const SdfGrid lazy = body_sdf_grid(j, m.parents(), m.capsule_radii(), 12, kSdfPadding, false);
  const SdfGrid full = body_sdf_grid(j, m.parents(), m.capsule_radii(), 12, kSdfPadding, true);
  for (int a = 0; a < 12; ++a)
    for (int b = 0; b < 12; ++b)
      for (int c = 0; c < 12; ++c) EXPECT_EQ(lazy.value(a, b, c), full.value(a, b, c));
}

TEST(SdfGrid, DegenerateSkeletonThrows) {
  const ToyBodyModel m;
  EXPECT_THROW(body_sdf_grid(Mat::Zero(24, 3), m.parents(), m.capsule_radii()), Error);
}

TEST(SdfGrid, CapsuleAxisDepthMatchesRadius) {
  const double r = 0.1;
  const std::vector<Capsule> caps{{Vec3(-0.5, 0, 0), Vec3(0.5, 0, 0), r}};
  Mat p(3, 3);
  p << 0, 0, 0, 0.2, 0, 0, -0.31, 0, 0;
  // Lattice lines through the axis: depth is exact along it.
  const SdfGrid aligned(caps, Vec3::Constant(-0.7), 1.4 / 30, 31);
  for (double v : trilinear_sample(aligned, p)) EXPECT_NEAR(v, r, 1e-12);
  // Axis midway between lattice lines: off by the distance to the nearest line.
  const SdfGrid offset(caps, Vec3::Constant(-0.7), 1.4 / 31, 32);
  const double gap = std::sqrt(2.0) * 0.5 * offset.cell();
  for (double v : trilinear_sample(offset, p)) EXPECT_NEAR(v, r - gap, 1e-12);
}

TEST(Trilinear, ExactOnLinearFields) {
  const int n = 6;
  const Vec3 origin(0.2, -0.4, 1.0);
  const double cell = 0.25;
  const Vec3 a(0.7, -1.3, 2.1);
  const double b = 0.4;
  std::vector<double> values;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) values.push_back(a.dot(origin + cell * Vec3(i, j, k)) + b);
  const SdfGrid g = SdfGrid::from_values(origin, cell, n, values);
  Rng rng(3);
  Mat pts(100, 3);
  for (int s = 0; s < 100; ++s)
    pts.row(s) = (origin + cell * (n - 1) * Vec3(rng.uniform(), rng.uniform(), rng.uniform())).transpose();
  Mat grad;
  const Vec v = trilinear_sample(g, pts, &grad);
  for (int s = 0; s < 100; ++s) {
    EXPECT_NEAR(v(s), a.dot(pts.row(s).transpose()) + b, 1e-12);
    EXPECT_LT((grad.row(s).transpose() - a).norm(), 1e-12);
  }
  // A voxel center returns the stored value, and half a cell along a ramp is 0.5.
  Mat c(1, 3);
  c.row(0) = (origin + cell * Vec3(2, 3, 1)).transpose();
  EXPECT_NEAR(trilinear_sample(g, c)(0), values[(2 * n + 3) * n + 1], 1e-12);
  std::vector<double> ramp;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k) ramp.push_back(i);
  Mat h(1, 3);
  h << 0.5, 0, 0;
  EXPECT_NEAR(trilinear_sample(SdfGrid::from_values(Vec3::Zero(), 1.0, n, ramp), h)(0), 0.5, 1e-15);
}

TEST(Trilinear, PointGradientMatchesFiniteDifferences) {
  const ToyBodyModel m;
  Rng rng(4);
  const Mat j = m.forward(BodyParams{});
  const SdfGrid g = body_sdf_grid(j, m.parents(), m.capsule_radii(), 32);
  int checked = 0;
  while (checked < 100) {
    const int joint = 1 + static_cast<int>(rng.index(23));
    const Vec3 p = j.row(joint).transpose() + 0.03 * Vec3(rng.normal(), rng.normal(), rng.normal());
    Mat x = p.transpose();
    Mat grad;
    if (trilinear_sample(g, x, &grad)(0) <= 0.0) continue;
    for (int a = 0; a < 3; ++a) {
      const double fd = test::central_difference([&](const Mat& q) { return trilinear_sample(g, q)(0); }, x, a, 1e-8);
      EXPECT_LT(std::abs(fd - grad(0, a)), 1e-6);
    }
    ++checked;
  }
}

// ---------------------------------------------------------------------------

TEST(LossPen, ZeroWhenObjectsAreOutsideTheBody) {
  const ToyBodyModel m;
  const Mat j = m.forward(BodyParams{});
  std::vector<SdfGrid> grids(2, body_sdf_grid(j, m.parents(), m.capsule_radii()));
  Rng rng(5);
  const Mat samples = test::random_mat(16, 3, rng, 0.02);
  ObjectPoses far{Mat(2, 6), Mat(2, 3)};
  far.rotation.row(0) = identity_rot6d().transpose();
  far.rotation.row(1) = identity_rot6d().transpose();
  far.translation << 3, 3, 3, -3, 0, 0;
  EXPECT_EQ(loss_pen({far}, {samples}, grids), 0.0);
}

TEST(LossPen, SampleOnCapsuleAxisContributesRadius) {
  const double r = 0.1;
  std::vector<SdfGrid> grids{SdfGrid(std::vector<Capsule>{{Vec3(-0.5, 0, 0), Vec3(0.5, 0, 0), r}},
                                     Vec3::Constant(-0.7), 1.4 / 30, 31)};
  ObjectPoses one{identity_rot6d().transpose(), (Mat(1, 3) << 0.1, 0, 0).finished()};
  EXPECT_NEAR(loss_pen({one}, {Mat::Zero(1, 3)}, grids), r, 1e-12);
}

TEST(LossPen, GradientMatchesFiniteDifferences) {
  const ToyBodyModel m;
  Rng rng(6);
  std::vector<SdfGrid> grids;
  for (int t = 0; t < 3; ++t) {
    BodyParams p;
    p.body_pose = test::random_mat(kBodyPoseJoints, 3, rng, 0.2);
    grids.push_back(body_sdf_grid(m.forward(p), m.parents(), m.capsule_radii()));
  }
  const Mat torso = m.forward(BodyParams{}).row(3);
  std::vector<ObjectPoses> poses(2);
  std::vector<Mat> samples;
  for (auto& o : poses) {
    o.rotation = rot_rows(3, rng);
    o.translation = test::random_mat(3, 3, rng, 0.03).rowwise() + RowVec(torso);
    samples.push_back(test::random_mat(20, 3, rng, 0.08));
  }
  std::vector<ObjectPoses> grad;
  const double v = loss_pen(poses, samples, grids, {}, &grad);
  ASSERT_GT(v, 0.0);
  const Mat x = pack(poses), g = pack(grad);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double fd = test::central_difference(
        [&](const Mat& y) { return loss_pen(unpack(y, poses), samples, grids); }, x, i, 1e-7);
    EXPECT_LT(test::relative_error(g(i), fd, 1e-4), 1e-5) << "coordinate " << i;
  }
}

TEST(LossDis, HandWorkedValues) {
  const Mat sample = Mat::Zero(1, 3);
  auto point = [](double x) {
    return ObjectPoses{identity_rot6d().transpose(), (Mat(1, 3) << x, 0, 0).finished()};
  };
  EXPECT_DOUBLE_EQ(loss_dis({point(0), point(1)}, {point(0), point(1)}, {sample, sample}), 0.0);
  EXPECT_DOUBLE_EQ(loss_dis({point(0), point(2)}, {point(0), point(1)}, {sample, sample}), 9.0);
  EXPECT_NEAR(loss_dis({point(5), point(6)}, {point(0), point(1)}, {sample, sample}), 0.0, 1e-12);
  EXPECT_THROW(loss_dis({point(0)}, {point(0)}, {sample}), Error);
}

TEST(LossDis, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  std::vector<ObjectPoses> pred(3), gt(3);
  std::vector<Mat> samples;
  for (int o = 0; o < 3; ++o) {
    pred[o] = {rot_rows(4, rng), test::random_mat(4, 3, rng, 0.3)};
    gt[o] = {rot_rows(4, rng), test::random_mat(4, 3, rng, 0.3)};
    samples.push_back(test::random_mat(8, 3, rng, 0.1));
  }
  const Vec mask = (Vec(4) << 1, 0, 1, 1).finished();
  std::vector<ObjectPoses> grad;
  loss_dis(pred, gt, samples, mask, &grad);
  const Mat x = pack(pred), g = pack(grad);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double fd = test::central_difference(
        [&](const Mat& y) { return loss_dis(unpack(y, pred), gt, samples, mask); }, x, i);
    EXPECT_LT(test::relative_error(g(i), fd, 1e-6), 1e-5) << "coordinate " << i;
  }
}

}  // namespace
}  // namespace himo
