#include <gtest/gtest.h>

#include "himo/diffusion.hpp"
#include "test_util.hpp"

namespace himo {
namespace {

/// Denoiser stand-in that always predicts a fixed clean signal.
class FixedDenoiser final : public DenoiserInterface {
 public:
  FixedDenoiser(int joints, int objects, Mat human, Mat obj)
      : joints_(joints), objects_(objects), human_(std::move(human)), obj_(std::move(obj)) {
    stats_.human_mean = Vec::Zero(human_feature_width(joints));
    stats_.human_std = Vec::Ones(human_feature_width(joints));
    stats_.object_mean = Vec::Zero(kObjectFeatureWidth);
    stats_.object_std = Vec::Ones(kObjectFeatureWidth);
  }
  int human_width() const override { return human_feature_width(joints_); }
  int num_objects() const override { return objects_; }
  const NormStats& stats() const override { return stats_; }
  void predict_x0(const Mat&, const Mat&, const MaskedCondition&, const MaskedCondition&,
                  const ConditionPack&, int, bool drop_text, Mat* h, Mat* o) const override {
    ++calls;
    if (drop_text) ++unconditional;
    *h = human_;
    *o = obj_;
  }
  mutable int calls = 0;
  mutable int unconditional = 0;

 private:
  int joints_, objects_;
  Mat human_, obj_;
  NormStats stats_;
};

/// Feature rows whose 6D blocks are valid rotations.
Mat valid_human(int frames, int joints, Rng& rng) {
  Mat h = test::random_mat(frames, human_feature_width(joints), rng);
  for (int t = 0; t < frames; ++t)
    for (int j = 0; j < joints; ++j)
      h.block(t, 3 * joints + 6 * j, 1, 6) = matrix_to_rot6d(random_rotation(rng)).transpose();
  return h;
}

Mat valid_objects(int frames, int objects, Rng& rng) {
  Mat o = test::random_mat(frames, objects * kObjectFeatureWidth, rng);
  for (int t = 0; t < frames; ++t)
    for (int k = 0; k < objects; ++k)
      o.block(t, kObjectFeatureWidth * k, 1, 6) = matrix_to_rot6d(random_rotation(rng)).transpose();
  return o;
}

TEST(Schedule, CosineInvariants) {
  for (int steps : {2, 50, 1000}) {
    const DiffusionSchedule s = make_schedule("cosine", steps);
    ASSERT_EQ(s.beta.size(), steps);
    for (int t = 0; t < steps; ++t) {
      EXPECT_GT(s.beta(t), 0.0);
      EXPECT_LT(s.beta(t), 1.0);
      EXPECT_NEAR(s.alpha(t), 1.0 - s.beta(t), 1e-15);
      if (t > 0) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
  }
  const DiffusionSchedule s = make_schedule("cosine", 1000);
  EXPECT_GT(s.alpha_bar(0), 0.99);
  EXPECT_LT(s.alpha_bar(999), 0.01);
  // Independent evaluation of f(t) = cos^2(((t/T) + s) / (1 + s) * pi / 2).
  auto f = [](double t) { return std::pow(std::cos((t / 1000.0 + 0.008) / 1.008 * M_PI / 2), 2); };
  EXPECT_NEAR(s.alpha_bar(10), f(11) / f(0), 1e-12);
}

TEST(Schedule, LinearEndpoints) {
  const DiffusionSchedule s = make_schedule("linear", 1000, 1e-4, 2e-2);
  EXPECT_NEAR(s.beta(0), 1e-4, 1e-15);
  EXPECT_NEAR(s.beta(999), 2e-2, 1e-15);
  for (int t = 1; t < 1000; ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
  EXPECT_THROW(make_schedule("quadratic", 10), Error);
  EXPECT_THROW(make_schedule("cosine", 0), Error);
}

TEST(QSample, BoundaryAndLinearity) {
  Rng rng(1);
  const DiffusionSchedule s = make_schedule("cosine", 1000);
  const Mat x0 = test::random_mat(5, 7, rng), n = test::random_mat(5, 7, rng);
  EXPECT_LT((q_sample(x0, 0, n, s) - x0).norm(), 1e-2 * x0.norm());
  const Mat zero = Mat::Zero(5, 7);
  EXPECT_EQ(q_sample(zero, 500, n, s), std::sqrt(1.0 - s.alpha_bar(500)) * n);
  EXPECT_LT((q_sample(2.5 * x0, 300, 2.5 * n, s) - 2.5 * q_sample(x0, 300, n, s)).norm(), 1e-12);
  EXPECT_THROW(q_sample(x0, 1000, n, s), Error);
}

TEST(QSample, PreservesUnitVariance) {
  Rng rng(2);
  const DiffusionSchedule s = make_schedule("cosine", 50);
  const Mat x0 = test::random_mat(100000, 1, rng), n = test::random_mat(100000, 1, rng);
  for (int t : {0, 10, 25, 49}) {
    const Mat x = q_sample(x0, t, n, s);
    const double mean = x.mean();
    const double var = (x.array() - mean).square().sum() / static_cast<double>(x.size() - 1);
    EXPECT_NEAR(var, 1.0, 0.05);
  }
}

TEST(ConditionMask, FirstFramesOnly) {
  Rng rng(3);
  const Mat init = test::random_mat(1, 4, rng);
  const MaskedCondition c = build_condition_mask(6, 1, init);
  EXPECT_EQ(c.values.row(0), init.row(0));
  EXPECT_EQ(c.values.bottomRows(5), Mat::Zero(5, 4));
  EXPECT_EQ(c.indicator, (Vec(6) << 1, 0, 0, 0, 0, 0).finished());
  EXPECT_EQ(c.stacked().cols(), 5);
  EXPECT_EQ(c.stacked().col(4), c.indicator);

  const Mat all = test::random_mat(6, 4, rng);
  const MaskedCondition full = build_condition_mask(6, 6, all);
  EXPECT_EQ(full.values, all);
  EXPECT_EQ(full.indicator, Vec::Ones(6));
  EXPECT_THROW(build_condition_mask(6, 0, Mat(0, 4)), Error);
  EXPECT_THROW(build_condition_mask(6, 7, test::random_mat(7, 4, rng)), Error);
}

TEST(Sampler, PerfectPredictorRecoversItsTarget) {
  Rng rng(4);
  const int frames = 8, joints = 2, objects = 2;
  const Mat h = valid_human(frames, joints, rng), o = valid_objects(frames, objects, rng);
  const FixedDenoiser model(joints, objects, h, o);
  ConditionPack c;
  c.k = 2;
  c.human_init = valid_human(2, joints, rng);
  c.object_init = valid_objects(2, objects, rng);
  c.geometry.resize(objects);
  const SampleResult r = sample(model, c, frames, make_schedule("cosine", 10), 5, 1.0);
  EXPECT_EQ(r.human.topRows(2), c.human_init);
  EXPECT_EQ(r.objects.topRows(2), c.object_init);
  EXPECT_LT((r.human.bottomRows(6) - h.bottomRows(6)).norm(), 1e-9);
  EXPECT_LT((r.objects.bottomRows(6) - o.bottomRows(6)).norm(), 1e-9);
}

TEST(Sampler, CountsDenoiserCalls) {
  Rng rng(5);
  const FixedDenoiser model(1, 1, valid_human(4, 1, rng), valid_objects(4, 1, rng));
  ConditionPack c;
  c.human_init = valid_human(1, 1, rng);
  c.object_init = valid_objects(1, 1, rng);
  c.geometry.resize(1);
  const DiffusionSchedule s = make_schedule("cosine", 7);
  EXPECT_EQ(sample(model, c, 4, s, 1, 1.0).denoiser_calls, 7);
  EXPECT_EQ(sample(model, c, 4, s, 1, 2.5).denoiser_calls, 14);
  const int before = model.unconditional;
  EXPECT_EQ(sample(model, c, 4, s, 1, 0.0).denoiser_calls, 7);
  EXPECT_EQ(model.unconditional - before, 7);
}

TEST(Sampler, DeterministicGivenSeed) {
  Rng rng(6);
  const FixedDenoiser model(1, 1, valid_human(4, 1, rng), valid_objects(4, 1, rng));
  ConditionPack c;
  c.human_init = valid_human(1, 1, rng);
  c.object_init = valid_objects(1, 1, rng);
  c.geometry.resize(1);
  const DiffusionSchedule s = make_schedule("linear", 6);
  const SampleResult a = sample(model, c, 4, s, 3), b = sample(model, c, 4, s, 3);
  EXPECT_EQ(a.human, b.human);
  EXPECT_EQ(a.objects, b.objects);
}

TEST(Sampler, RejectsMismatchedConditions) {
  Rng rng(7);
  const FixedDenoiser model(1, 2, valid_human(4, 1, rng), valid_objects(4, 2, rng));
  ConditionPack c;
  c.human_init = valid_human(1, 1, rng);
  c.object_init = valid_objects(1, 1, rng);
  c.geometry.resize(1);
  EXPECT_THROW(sample(model, c, 4, make_schedule("cosine", 3), 1), Error);
}

TEST(ProjectRotations, RepairsScaledBlocks) {
  Rng rng(8);
  Mat h = valid_human(3, 2, rng), o = valid_objects(3, 1, rng);
  const Mat h0 = h, o0 = o;
  h.middleCols(6, 6) *= 3.0;
  o.leftCols(6) *= 0.5;
  project_rotations(h, 2, o);
  EXPECT_LT((h - h0).norm(), 1e-12);
  EXPECT_LT((o - o0).norm(), 1e-12);
}

}  // namespace
}  // namespace himo
