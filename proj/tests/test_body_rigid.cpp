#include <gtest/gtest.h>

#include "himo/rigid_fit.hpp"
#include "test_util.hpp"

namespace himo {
namespace {

BodyParams random_params(Rng& rng, double amp = 0.3) {
  BodyParams p;
  p.global_orient = Vec3(rng.normal(), rng.normal(), rng.normal()) * amp;
  p.body_pose = test::random_mat(kBodyPoseJoints, 3, rng, amp);
  p.hand_pose = test::random_mat(kHandPoseJoints, 3, rng, amp);
  p.translation = Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.1;
  p.shape = test::random_mat(kShapeDims, 1, rng, 0.5);
  return p;
}

/// Smooth synthetic motion with a fixed, stature-derived shape.
ParamsSeq smooth_sequence(int frames, Rng& rng, double amp) {
  const Mat base = test::random_mat(kBodyPoseJoints, 3, rng, amp);
  const Mat swing = test::random_mat(kBodyPoseJoints, 3, rng, 0.3 * amp);
  ParamsSeq seq(static_cast<std::size_t>(frames));
  for (int t = 0; t < frames; ++t) {
    BodyParams& p = seq[static_cast<std::size_t>(t)];
    const double s = std::sin(0.2 * t);
    p.shape = shape_from_stature(1.70, 65.0);
    p.body_pose = base + s * swing;
    p.global_orient = Vec3(0, 0.3 * s, 0);
    p.translation = Vec3(0.01 * t, 0, 0);
  }
  return seq;
}

std::vector<Mat> joints_of(const BodyModel& m, const ParamsSeq& seq) {
  std::vector<Mat> out;
  for (const auto& p : seq) out.push_back(m.forward(p));
  return out;
}

TEST(ToyBody, IdentityParamsGiveRestPose) {
  const ToyBodyModel m;
  const Mat j = m.forward(BodyParams{});
  EXPECT_EQ(j.rows(), 24);
  Vec3 expect = Vec3::Zero();
  for (int i : {0, 3, 6, 9, 13, 16}) expect += m.rest_offsets()[static_cast<std::size_t>(i)];
  EXPECT_LT((j.row(ToyBodyModel::kLeftShoulder).transpose() - expect).norm(), 1e-15);
  EXPECT_NEAR(j(ToyBodyModel::kLeftShoulder, 0), 0.17, 1e-12);
  EXPECT_NEAR(j(ToyBodyModel::kRightShoulder, 0), -0.17, 1e-12);
  EXPECT_NEAR(j(ToyBodyModel::kLeftHand, 0) - j(ToyBodyModel::kLeftShoulder, 0), 0.63, 1e-12);
}

TEST(ToyBody, BackwardMatchesFiniteDifferences) {
  const ToyBodyModel m;
  Rng rng(4);
  const BodyParams p = random_params(rng);
  const Mat w = test::random_mat(24, 3, rng);
  const BodyParams g = m.backward(p, m.forward_state(p), w);
  const Vec analytic = g.pack();
  auto f = [&](const Mat& x) {
    return (m.forward(BodyParams::unpack(x)).array() * w.array()).sum();
  };
  const Mat x = p.pack();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double fd = test::central_difference(f, x, i);
    EXPECT_LT(test::relative_error(analytic(i), fd, 1e-6), 1e-6) << "coordinate " << i;
  }
}

TEST(BodyParams, PackRoundTripAndCanonicalize) {
  Rng rng(9);
  BodyParams p = random_params(rng, 3.0);
  const BodyParams q = BodyParams::unpack(p.pack());
  EXPECT_EQ(q.pack(), p.pack());
  const ToyBodyModel m;
  const Mat before = m.forward(p);
  p.canonicalize();
  EXPECT_TRUE(p.finite());
  EXPECT_LT(p.global_orient.norm(), M_PI);
  for (int i = 0; i < kBodyPoseJoints; ++i) EXPECT_LT(p.body_pose.row(i).norm(), M_PI);
  EXPECT_LT((m.forward(p) - before).norm(), 1e-9);
}

TEST(ShapeFromStature, ReferenceStatureIsNeutralHeight) {
  EXPECT_DOUBLE_EQ(shape_from_stature(1.70, 65.0)(0), 0.0);
  EXPECT_GT(shape_from_stature(1.85, 65.0)(0), 0.0);
  EXPECT_THROW(shape_from_stature(0.1, 65.0), Error);
}

// ---------------------------------------------------------------------------

TEST(RigidPose, TrivialCases) {
  Mat rest(4, 3);
  rest << 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1;
  RigidPose p = rigid_pose_from_markers(rest, rest);
  EXPECT_LT((p.rotation - Mat3::Identity()).norm(), 1e-12);
  EXPECT_LT(p.translation.norm(), 1e-12);
  EXPECT_LT(p.residual, 1e-12);

  const Mat moved = rest.rowwise() + RowVec((RowVec(3) << 1, 2, 3).finished());
  p = rigid_pose_from_markers(rest, moved);
  EXPECT_LT((p.rotation - Mat3::Identity()).norm(), 1e-12);
  EXPECT_LT((p.translation - Vec3(1, 2, 3)).norm(), 1e-12);

  const Mat3 rz = Eigen::AngleAxisd(M_PI / 2, Vec3::UnitZ()).toRotationMatrix();
  const Mat rotated = (rest * rz.transpose()).rowwise() + RowVec((RowVec(3) << 0.1, 0, 0).finished());
  p = rigid_pose_from_markers(rest, rotated);
  EXPECT_LT((p.rotation - rz).norm(), 1e-9);
  EXPECT_LT((p.translation - Vec3(0.1, 0, 0)).norm(), 1e-9);
}

TEST(RigidPose, ReflectionIsNeverReturned) {
  Rng rng(2);
  const Mat rest = test::random_mat(6, 3, rng);
  Mat mirrored = rest;
  mirrored.col(0) *= -1.0;
  const RigidPose p = rigid_pose_from_markers(rest, mirrored);
  EXPECT_NEAR(p.rotation.determinant(), 1.0, 1e-12);
}

TEST(RigidPose, DegenerateMarkersThrow) {
  Mat line(3, 3);
  line << 0, 0, 0, 1, 0, 0, 2, 0, 0;
  EXPECT_THROW(rigid_pose_from_markers(line, line), Error);
  EXPECT_THROW(rigid_pose_from_markers(Mat::Zero(2, 3), Mat::Zero(2, 3)), Error);
}

TEST(RigidPose, LocalPerturbationsNeverImprove) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const Mat rest = test::random_mat(5, 3, rng);
    const Mat3 r = random_rotation(rng);
    const Mat observed =
        ((rest * r.transpose()).rowwise() + RowVec(test::random_mat(1, 3, rng))) + test::random_mat(5, 3, rng, 0.05);
    const RigidPose p = rigid_pose_from_markers(rest, observed);
    auto cost = [&](const Mat3& rr, const Vec3& t) {
      return ((rest * rr.transpose()).rowwise() + t.transpose() - observed).squaredNorm();
    };
    const double best = cost(p.rotation, p.translation);
    for (int d = 0; d < 100; ++d) {
      const Vec3 w = 1e-4 * Vec3(rng.normal(), rng.normal(), rng.normal());
      const Vec3 dt = 1e-4 * Vec3(rng.normal(), rng.normal(), rng.normal());
      EXPECT_GE(cost(axis_angle_to_matrix(w) * p.rotation, p.translation + dt), best - 1e-15);
    }
  }
}

TEST(CentroidBias, HandWorkedCases) {
  Mat sym(2, 3);
  sym << 1, 0, 0, -1, 0, 0;
  EXPECT_LT(calibrate_centroid_bias(sym, Vec3::Zero()).norm(), 1e-15);
  Mat face(4, 3);
  face << 0.5, 0.5, 0.5, 0.5, -0.5, 0.5, 0.5, 0.5, -0.5, 0.5, -0.5, -0.5;
  EXPECT_LT((calibrate_centroid_bias(face, Vec3::Zero()) - Vec3(-0.5, 0, 0)).norm(), 1e-15);
}

TEST(TrackRigidObject, RecoversCentroidFromOffsetMarkers) {
  Rng rng(5);
  const Mat rest = test::random_mat(8, 3, rng, 0.1).rowwise() + RowVec((RowVec(3) << 0.05, 0, 0).finished());
  const Vec3 centroid(0.0, 0.01, 0.0);
  std::vector<Mat> observed;
  std::vector<Mat3> rs;
  std::vector<Vec3> ts;
  for (int f = 0; f < 5; ++f) {
    rs.push_back(random_rotation(rng));
    ts.push_back(Vec3(rng.normal(), rng.normal(), rng.normal()));
    observed.push_back((rest * rs.back().transpose()).rowwise() + ts.back().transpose());
  }
  const RigidTrack track = track_rigid_object(rest, observed, centroid);
  for (int f = 0; f < 5; ++f) {
    const auto i = static_cast<std::size_t>(f);
    EXPECT_LT((track.rotations[i] - rs[i]).norm(), 1e-9);
    EXPECT_LT((track.centroids[i] - (rs[i] * centroid + ts[i])).norm(), 1e-9);
    EXPECT_LT(track.residuals[i], 1e-9);
  }
}

// ---------------------------------------------------------------------------

TEST(Energies, HandWorkedValues) {
  const ToyBodyModel m;
  ParamsSeq one(1);
  std::vector<Mat> targets = joints_of(m, one);
  EXPECT_DOUBLE_EQ(joint_energy(m, one, targets), 0.0);
  targets[0](5, 0) += 1.0;
  EXPECT_NEAR(joint_energy(m, one, targets), 1.0, 1e-12);

  ParamsSeq still(3);
  EXPECT_DOUBLE_EQ(smooth_energy(m, still), 0.0);
  ParamsSeq moving(3);
  for (int t = 0; t < 3; ++t) moving[static_cast<std::size_t>(t)].translation = Vec3(0.1 * t, 0, 0);
  // Every joint moves 0.1 per frame: two displacements of 0.01 each, 24 joints.
  EXPECT_NEAR(smooth_energy(m, moving), 24 * 2 * 0.01, 1e-12);
  EXPECT_DOUBLE_EQ(smooth_energy(m, ParamsSeq(1)), 0.0);

  BodyParams p;
  EXPECT_DOUBLE_EQ(reg_energy(p), 0.0);
  p.body_pose(3, 1) = 0.5;
  EXPECT_DOUBLE_EQ(reg_energy(p), 0.25);
  p.global_orient = Vec3(1, 1, 1);
  p.translation = Vec3(1, 1, 1);
  EXPECT_DOUBLE_EQ(reg_energy(p), 0.25);
}

TEST(Energies, DefaultWeights) {
  const EnergyWeights w;
  EXPECT_EQ(w.joint, 1.0);
  EXPECT_EQ(w.smooth, 0.1);
  EXPECT_EQ(w.reg, 0.01);
}

TEST(Energies, GradientsMatchFiniteDifferences) {
  const ToyBodyModel m;
  Rng rng(21);
  ParamsSeq seq;
  std::vector<Mat> targets;
  for (int t = 0; t < 3; ++t) {
    seq.push_back(random_params(rng));
    targets.push_back(m.forward(random_params(rng)));
  }
  const EnergyWeights w{1.0, 0.7, 0.3};
  ParamsSeq grad;
  total_energy(m, seq, targets, w, &grad);
  const int size = BodyParams::kSize;
  Mat x(size, 3);
  for (int t = 0; t < 3; ++t) x.col(t) = seq[static_cast<std::size_t>(t)].pack();
  auto f = [&](const Mat& xs) {
    ParamsSeq s;
    for (int t = 0; t < 3; ++t) s.push_back(BodyParams::unpack(xs.col(t)));
    return total_energy(m, s, targets, w).total;
  };
  for (int t = 0; t < 3; ++t) {
    const Vec g = grad[static_cast<std::size_t>(t)].pack();
    for (int i = 0; i < size; ++i) {
      const double fd = test::central_difference(f, x, t * size + i);
      EXPECT_LT(test::relative_error(g(i), fd, 1e-5), 1e-4) << "frame " << t << " coordinate " << i;
    }
  }
}

TEST(Energies, InvariantUnderGlobalRigidTransform) {
  const ToyBodyModel m;
  Rng rng(17);
  ParamsSeq seq;
  std::vector<Mat> targets;
  for (int t = 0; t < 4; ++t) {
    seq.push_back(random_params(rng));
    targets.push_back(m.forward(random_params(rng)));
  }
  const Mat3 q = random_rotation(rng);
  const Vec3 shift(0.3, -1.2, 2.0);
  ParamsSeq moved = seq;
  std::vector<Mat> moved_targets;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    BodyParams& p = moved[t];
    const Vec3 root = m.forward(seq[t]).row(0).transpose();
    const Vec3 bone = root - seq[t].translation;
    p.global_orient = matrix_to_axis_angle(q * axis_angle_to_matrix(seq[t].global_orient));
    p.translation = q * root + shift - bone;
    moved_targets.push_back((targets[t] * q.transpose()).rowwise() + shift.transpose());
  }
  const EnergyWeights w;
  const double before = total_energy(m, seq, targets, w).total;
  const double after = total_energy(m, moved, moved_targets, w).total;
  EXPECT_NEAR(before, after, 1e-6 * std::max(1.0, before));
}

TEST(FitBody, DataTermAloneRecoversKnownParameters) {
  const ToyBodyModel m;
  Rng rng(3);
  const ParamsSeq gt = smooth_sequence(12, rng, 0.2);
  const auto targets = joints_of(m, gt);
  FitConfig c;
  c.weights = {1.0, 0.0, 0.0};
  c.max_iterations = 3000;
  c.rel_tolerance = 0.0;
  c.final_lr_fraction = 0.001;
  const FitResult r = fit_body(targets, m, c);
  double err = 0.0;
  for (std::size_t t = 0; t < gt.size(); ++t)
    err += (m.forward(r.params[t]) - targets[t]).rowwise().norm().mean();
  EXPECT_LT(err / static_cast<double>(gt.size()), 1e-3);
  ASSERT_FALSE(r.history.empty());
  EXPECT_LE(r.energy.total, r.history.front());
}

TEST(IkInitialPose, ReproducesReachableTargets) {
  const ToyBodyModel m;
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    BodyParams gt = random_params(rng, 0.6);
    const Mat target = m.forward(gt);
    const BodyParams p = ik_initial_pose(m, target, gt.shape);
    EXPECT_LT((m.forward(p) - target).cwiseAbs().maxCoeff(), 1e-9);
    // Leaf joints carry no rotation.
    EXPECT_EQ(p.hand_pose.row(0).norm(), 0.0);
  }
  EXPECT_THROW(ik_initial_pose(m, Mat::Zero(5, 3), BodyParams{}.shape), Error);
}

TEST(FitBody, HeavySmoothingNeverIncreasesSmoothEnergy) {
  const ToyBodyModel m;
  Rng rng(8);
  const ParamsSeq gt = smooth_sequence(10, rng, 0.2);
  const auto targets = joints_of(m, gt);
  FitConfig loose, stiff;
  loose.weights = {1.0, 0.0, 0.01};
  stiff.weights = {1.0, 1e3, 0.01};
  const FitResult a = fit_body(targets, m, loose);
  const FitResult b = fit_body(targets, m, stiff);
  EXPECT_LE(smooth_energy(m, b.params), smooth_energy(m, a.params));
}

TEST(FitBody, StopsOnPlateauAndRejectsBadInput) {
  const ToyBodyModel m;
  const std::vector<Mat> still(3, m.forward(BodyParams{}));
  const FitResult r = fit_body(still, m);
  EXPECT_TRUE(r.converged);
  EXPECT_LT(r.iterations, 500);
  EXPECT_THROW(fit_body({}, m), Error);
  EXPECT_THROW(fit_body({Mat::Zero(5, 3)}, m), Error);
}

}  // namespace
}  // namespace himo
