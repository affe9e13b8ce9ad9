#include <gtest/gtest.h>

#include "himo/composer.hpp"
#include "himo/denoiser.hpp"
#include "test_util.hpp"

namespace himo {
namespace {

class Composer : public ::testing::Test {
 protected:
  void SetUp() override {
    corpus_ = std::make_unique<Corpus>(test::small_corpus(6));
    DenoiserConfig c;
    c.layers = 1;
    c.heads = 2;
    c.width = 8;
    c.ff_mult = 2;
    c.geometry_width = 4;
    c.geometry_points = 128;
    c.vocab_size = corpus_->vocabulary().size();
    c.diffusion_steps = 3;
    c.dropout = 0.0;
    model_ = std::make_unique<Denoiser>(c, 1);
    model_->set_stats(corpus_->stats());
    schedule_ = make_schedule("cosine", c.diffusion_steps);
    const HoiSequence& s = *corpus_->split("train").front();
    initial_.human = s.human.flatten().topRows(1);
    initial_.objects = pack_objects(s.objects, {0, 1}).topRows(1);
    for (const auto& t : s.objects) initial_.geometry.push_back(t.geometry);
    prompt_ = s.segments[0].text;
  }

  TimelineScript script(const std::vector<int>& lengths, int k) const {
    TimelineScript t;
    t.k = k;
    t.lengths = lengths;
    t.prompts.assign(lengths.size(), prompt_);
    return t;
  }

  std::unique_ptr<Corpus> corpus_;
  std::unique_ptr<Denoiser> model_;
  DiffusionSchedule schedule_;
  InitialState initial_;
  std::string prompt_;
};

TEST(TimelineScript, LengthArithmetic) {
  TimelineScript s;
  s.prompts = {"a", "b"};
  s.lengths = {100, 100};
  s.k = 10;
  EXPECT_EQ(s.total_length(), 190);
  s.prompts = {"a"};
  s.lengths = {40};
  EXPECT_EQ(s.total_length(), 40);
  s.prompts = {"a", "b", "c"};
  s.lengths = {30, 25, 12};
  s.k = 5;
  EXPECT_EQ(s.total_length(), 57);
  s.k = 12;
  EXPECT_THROW(s.validate(), Error);
}

TEST(TimelineScript, FromJson) {
  const TimelineScript s = TimelineScript::from_json(R"([{"text": "pick the cup", "length": 40}, {"text": "put it down"}])", 5);
  ASSERT_EQ(s.segments(), 2);
  EXPECT_EQ(s.lengths[0], 40);
  EXPECT_EQ(s.lengths[1], kDefaultSegmentLength);
  EXPECT_EQ(s.prompts[1], "put it down");
  EXPECT_EQ(s.k, 5);
  EXPECT_THROW(TimelineScript::from_json("[]"), Error);
  EXPECT_THROW(TimelineScript::from_json("{not json"), Error);
}

TEST(TransitionJerk, HandWorkedCases) {
  Mat steady(10, 6);
  for (int t = 0; t < 10; ++t) steady.row(t) << 0.1 * t, 0, 0, 0, -0.2 * t, 1;
  for (double j : transition_jerk(steady, {5})) EXPECT_NEAR(j, 0.0, 1e-12);
  Mat step = Mat::Zero(10, 3);
  step.bottomRows(5).col(0).setConstant(1.0);
  EXPECT_GE(transition_jerk(step, {5})[0], 1.0);
  // Translating the whole timeline changes nothing.
  Mat shifted = step;
  shifted.col(1).array() += 3.0;
  EXPECT_EQ(transition_jerk(shifted, {5}), transition_jerk(step, {5}));
  EXPECT_THROW(transition_jerk(step, {10}), Error);
}

TEST_F(Composer, LengthFormulaAndBitExactOverlaps) {
  for (int k : {1, 5, 10, 20}) {
    for (int m = 1; m <= 5; ++m) {
      std::vector<int> lengths;
      for (int i = 0; i < m; ++i) lengths.push_back(k + 3 + 2 * i);
      const TimelineScript s = script(lengths, k);
      const ComposedTimeline t = compose_timeline(*model_, corpus_->vocabulary(), s, initial_, schedule_, 9);
      ASSERT_EQ(t.frames(), s.total_length()) << "k " << k << " m " << m;
      ASSERT_EQ(t.objects.rows(), s.total_length());
      ASSERT_EQ(static_cast<int>(t.boundaries.size()), m - 1);
      EXPECT_EQ(t.human.topRows(1), initial_.human);
      for (int i = 1; i < m; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        const int off = t.offsets[ui];
        EXPECT_EQ(t.boundaries[ui - 1], off + k);
        // Conditioned frames equal the previous clip's tail, bit for bit.
        EXPECT_EQ(t.clip_human[ui].topRows(k), t.clip_human[ui - 1].bottomRows(k));
        EXPECT_EQ(t.clip_objects[ui].topRows(k), t.clip_objects[ui - 1].bottomRows(k));
        EXPECT_EQ(t.human.middleRows(off, k), t.clip_human[ui].topRows(k));
        EXPECT_EQ(t.human.middleRows(off + k, lengths[ui] - k), t.clip_human[ui].bottomRows(lengths[ui] - k));
      }
      for (double j : t.transition) EXPECT_TRUE(std::isfinite(j));
      EXPECT_EQ(t.denoiser_calls, m * 2 * schedule_.steps);
    }
  }
}

TEST_F(Composer, SingleSegmentEqualsDirectCall) {
  const TimelineScript s = script({20}, 5);
  const ComposedTimeline t = compose_timeline(*model_, corpus_->vocabulary(), s, initial_, schedule_, 4);
  const SampleResult r = generate_segment(*model_, corpus_->vocabulary(), prompt_, 20, initial_.human,
                                          initial_.objects, initial_.geometry, schedule_,
                                          derive_seed(4, 0));
  EXPECT_EQ(t.human, r.human);
  EXPECT_EQ(t.objects, r.objects);
}

TEST_F(Composer, DeterministicAndSeedSensitive) {
  const TimelineScript s = script({15, 15}, 5);
  const auto a = compose_timeline(*model_, corpus_->vocabulary(), s, initial_, schedule_, 2);
  const auto b = compose_timeline(*model_, corpus_->vocabulary(), s, initial_, schedule_, 2);
  const auto c = compose_timeline(*model_, corpus_->vocabulary(), s, initial_, schedule_, 3);
  EXPECT_EQ(a.human, b.human);
  EXPECT_NE(a.human, c.human);
}

TEST_F(Composer, SegmentErrorsAndPartialResults) {
  EXPECT_THROW(generate_segment(*model_, corpus_->vocabulary(), prompt_, 1, initial_.human,
                                initial_.objects, initial_.geometry, schedule_, 1),
               Error);
  EXPECT_THROW(generate_segment(*model_, corpus_->vocabulary(), "   ", 10, initial_.human,
                                initial_.objects, initial_.geometry, schedule_, 1),
               Error);
  TimelineScript s = script({12, 12, 12}, 4);
  s.prompts[2] = "";
  ComposedTimeline partial;
  EXPECT_THROW(compose_timeline(*model_, corpus_->vocabulary(), s, initial_, schedule_, 1, {}, &partial), Error);
  EXPECT_EQ(partial.clip_human.size(), 2u);
}

TEST_F(Composer, ObjectRotationsStayInTheGeometryFrame) {
  const TimelineScript s = script({12, 12}, 4);
  const ComposedTimeline t = compose_timeline(*model_, corpus_->vocabulary(), s, initial_, schedule_, 6);
  EXPECT_EQ(t.objects.topRows(1), initial_.objects);
  for (int r = 0; r < t.frames(); ++r)
    for (int o = 0; o < 2; ++o) {
      const Mat3 m = rot6d_to_matrix(t.objects.block<1, 6>(r, 9 * o).transpose());
      EXPECT_LT((m.transpose() * m - Mat3::Identity()).norm(), 1e-6);
    }
  const HoiSequence seq = timeline_to_sequence(t, s, 24, 15.0, "tl");
  EXPECT_NO_THROW(seq.validate());
  ASSERT_EQ(seq.segments.size(), 2u);
  EXPECT_EQ(seq.segments[1].start, t.boundaries[0]);
}

}  // namespace
}  // namespace himo
