#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "himo/denoiser.hpp"
#include "reference.hpp"
#include "test_util.hpp"

namespace himo {
namespace {

TEST(DenoiserConfig, ValidatesWidthAndHeads) {
  DenoiserConfig c = ref::tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = ref::tiny_config();
  c.layers = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Denoiser, OutputShapesAndDeterminism) {
  const DenoiserConfig c = ref::tiny_config();
  const Denoiser a(c, 5), b(c, 5);
  Rng rng(1);
  const auto in = ref::random_inputs(c, 6, rng);
  Mat ha, oa, hb, ob;
  a.predict_x0(in.xh, in.xo, in.hc, in.oc, in.cond, in.t, false, &ha, &oa);
  b.predict_x0(in.xh, in.xo, in.hc, in.oc, in.cond, in.t, false, &hb, &ob);
  EXPECT_EQ(ha.rows(), 6);
  EXPECT_EQ(ha.cols(), c.human_width());
  EXPECT_EQ(oa.cols(), c.object_width());
  EXPECT_EQ(ha, hb);
  EXPECT_EQ(oa, ob);
  a.predict_x0(in.xh, in.xo, in.hc, in.oc, in.cond, in.t, false, &hb, &ob);
  EXPECT_EQ(ha, hb);
}

TEST(Denoiser, RejectsMismatchedStreams) {
  const DenoiserConfig c = ref::tiny_config();
  const Denoiser d(c, 5);
  Rng rng(2);
  auto in = ref::random_inputs(c, 4, rng);
  Mat h, o;
  EXPECT_THROW(d.predict_x0(Mat::Zero(4, 3), in.xo, in.hc, in.oc, in.cond, 0, false, &h, &o), Error);
  in.cond.geometry.pop_back();
  EXPECT_THROW(d.predict_x0(in.xh, in.xo, in.hc, in.oc, in.cond, 0, false, &h, &o), Error);
}

TEST(Denoiser, BranchesShareNoParameters) {
  const DenoiserConfig c = ref::tiny_config();
  const Denoiser d(c, 3);
  std::set<const nn::Parameter*> human, object;
  std::multiset<std::pair<Eigen::Index, Eigen::Index>> hs, os;
  for (int l = 0; l < c.layers; ++l) {
    for (bool is_human : {true, false}) {
      const BranchBlock& b = d.block(l, is_human);
      const nn::Parameter* ps[] = {b.ln_self.gain, b.ln_self.bias, b.ln_cross.gain, b.ln_cross.bias,
                                   b.ln_ff.gain, b.ln_ff.bias, b.q.weight, b.q.bias, b.k.weight,
                                   b.k.bias, b.v.weight, b.v.bias, b.o.weight, b.o.bias,
                                   b.cross_q.weight, b.cross_q.bias, b.cross_k.weight,
                                   b.cross_k.bias, b.cross_v.weight, b.cross_v.bias,
                                   b.ff1.weight, b.ff1.bias, b.ff2.weight, b.ff2.bias};
      for (const auto* p : ps) {
        (is_human ? human : object).insert(p);
        (is_human ? hs : os).insert({p->value.rows(), p->value.cols()});
      }
    }
  }
  for (const auto* p : human) EXPECT_EQ(object.count(p), 0u);
  EXPECT_EQ(human.size(), object.size());
  EXPECT_EQ(hs, os);
}

TEST(MutualBlock, CrossAttentionMatchesLiteralForm) {
  const DenoiserConfig c = ref::tiny_config();
  const Denoiser d(c, 7);
  Rng rng(3);
  const auto in = ref::random_inputs(c, 5, rng);
  nn::Tape tape;
  ForwardTrace trace;
  d.forward(tape, in.xh, in.xo, in.hc, in.oc, in.cond, in.t, false, nullptr, &trace);
  for (int l = 0; l < c.layers; ++l) {
    const BlockTrace& bt = trace.blocks[static_cast<std::size_t>(l)];
    const BranchBlock& bh = d.block(l, true);
    const BranchBlock& bo = d.block(l, false);
    // Keys and values come from the other branch's (normalized) block input.
    const Mat qh = ref::linear(ref::layer_norm(bt.human_self, bh.ln_cross), bh.cross_q);
    const Mat ko = ref::linear(ref::layer_norm(bt.object_in, bo.ln_self), bo.cross_k);
    const Mat vo = ref::linear(ref::layer_norm(bt.object_in, bo.ln_self), bo.cross_v);
    EXPECT_LT((ref::literal_cross_attention(qh, ko, vo) - bt.human_cross).cwiseAbs().maxCoeff(), 1e-6);
    const Mat qo = ref::linear(ref::layer_norm(bt.object_self, bo.ln_cross), bo.cross_q);
    const Mat kh = ref::linear(ref::layer_norm(bt.human_in, bh.ln_self), bh.cross_k);
    const Mat vh = ref::linear(ref::layer_norm(bt.human_in, bh.ln_self), bh.cross_v);
    EXPECT_LT((ref::literal_cross_attention(qo, kh, vh) - bt.object_cross).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_EQ(bt.human_cross_probs.rows(), 6);  // condition token + 5 frames
  }
}

TEST(MutualBlock, ZeroCrossWeightsReduceToSelfAttentionBlocks) {
  const DenoiserConfig c = ref::tiny_config();
  Denoiser d(c, 9);
  for (int l = 0; l < c.layers; ++l)
    for (bool h : {true, false}) {
      const BranchBlock& b = d.block(l, h);
      b.cross_v.weight->value.setZero();
      b.cross_v.bias->value.setZero();
    }
  Rng rng(4);
  const Mat h = test::random_mat(6, c.width, rng), o = test::random_mat(6, c.width, rng);
  nn::Tape tape;
  auto [oh, oo] = d.mutual_block_forward(tape, 1, tape.constant(h), tape.constant(o), nullptr);
  EXPECT_LT((oh.value() - ref::self_attention_block(h, d.block(1, true), c.heads)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((oo.value() - ref::self_attention_block(o, d.block(1, false), c.heads)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Denoiser, GradientsMatchFiniteDifferences) {
  const DenoiserConfig c = ref::tiny_config();
  Denoiser d(c, 11);
  Rng rng(5);
  const auto in = ref::random_inputs(c, 4, rng);
  const ref::ProbeReport r = ref::denoiser_gradient_probes(d, in, 50, rng);
  EXPECT_EQ(r.probes, 50);
  EXPECT_LT(r.max_relative_error, 1e-5);
}

TEST(Denoiser, TrainingDropoutChangesOutputOnlyWithRng) {
  DenoiserConfig c = ref::tiny_config();
  c.dropout = 0.5;
  const Denoiser d(c, 2);
  Rng rng(6);
  const auto in = ref::random_inputs(c, 4, rng);
  nn::Tape t1, t2;
  Rng drop(1);
  const Mat eval = d.forward(t1, in.xh, in.xo, in.hc, in.oc, in.cond, 0, false, nullptr).first.value();
  const Mat train = d.forward(t2, in.xh, in.xo, in.hc, in.oc, in.cond, 0, false, &drop).first.value();
  EXPECT_GT((eval - train).norm(), 0.0);
}

TEST(TextEncoder, FallbackBehaviour) {
  const Denoiser d(ref::tiny_config(), 3);
  const Mat empty = d.encode_text({0, 0, 0});
  EXPECT_EQ(empty, d.encode_text({}));
  EXPECT_EQ(d.encode_text({3, 4, 0}), d.encode_text({3, 4, 0, 0, 0}));
  EXPECT_GT((d.encode_text({3, 4}) - d.encode_text({5})).norm(), 0.0);
  EXPECT_THROW(d.encode_text({99}), Error);
}

TEST(TextEncoder, FrozenEmbeddingsFile) {
  const auto dir = test::temp_dir("frozen");
  {
    std::ofstream f(dir / "emb.json");
    f << R"({"dim": 3, "embeddings": {"pick the box": [1, 0, 0], "drop it": [0, 1, 0]}})";
  }
  DenoiserConfig c = ref::tiny_config();
  c.text_encoder = "frozen";
  c.frozen_embeddings = dir / "emb.json";
  const Denoiser d(c, 1);
  EXPECT_GT((d.encode_text({}, "pick the box") - d.encode_text({}, "drop it")).norm(), 0.0);
  EXPECT_THROW(d.encode_text({}, "unknown text"), Error);
  c.frozen_embeddings = dir / "missing.json";
  EXPECT_THROW(Denoiser(c, 1), Error);
}

TEST(ConditionToken, DependsOnTimestep) {
  const DenoiserConfig c = ref::tiny_config();
  const Denoiser d(c, 4);
  nn::Tape tape;
  const nn::Var text = tape.constant(d.encode_text({2, 3}));
  const Mat a = d.embed_conditions(tape, text, 0).value();
  const Mat a2 = d.embed_conditions(tape, text, 0).value();
  const Mat b = d.embed_conditions(tape, text, c.diffusion_steps - 1).value();
  EXPECT_EQ(a, a2);
  EXPECT_GT((a - b).norm(), 0.0);
  EXPECT_THROW(d.embed_conditions(tape, text, c.diffusion_steps), Error);
}

TEST(PositionalEncoding, SinCosHalves) {
  const Mat pe = positional_encoding(3, 6);
  EXPECT_EQ(pe.row(0), (RowVec(6) << 0, 0, 0, 1, 1, 1).finished());
  EXPECT_NEAR(pe(2, 0), std::sin(2.0), 1e-15);
  EXPECT_NEAR(pe(2, 4), std::cos(2.0 * std::exp(-std::log(10000.0) / 3)), 1e-15);
}

TEST(Denoiser, ParameterExportImportRoundTrip) {
  const DenoiserConfig c = ref::tiny_config();
  const Denoiser a(c, 21);
  Denoiser b(c);
  TensorFile f;
  a.params().export_to(f, false);
  b.params().import_from(TensorFile::deserialize(f.serialize()), false);
  Rng rng(7);
  const auto in = ref::random_inputs(c, 3, rng);
  Mat ha, oa, hb, ob;
  a.predict_x0(in.xh, in.xo, in.hc, in.oc, in.cond, in.t, true, &ha, &oa);
  b.predict_x0(in.xh, in.xo, in.hc, in.oc, in.cond, in.t, true, &hb, &ob);
  EXPECT_EQ(ha, hb);
  EXPECT_EQ(oa, ob);
}

}  // namespace
}  // namespace himo
