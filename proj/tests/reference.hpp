#pragma once

// Plain-Eigen reference implementations used to cross-check the tape-based
// network code, plus a finite-difference probe harness for the denoiser.

#include <cmath>
#include <numbers>

#include "himo/denoiser.hpp"
#include "test_util.hpp"

namespace himo::ref {

inline Mat linear(const Mat& x, const nn::Linear& l) {
  return (x * l.weight->value).rowwise() + l.bias->value.row(0);
}

inline Mat layer_norm(const Mat& x, const nn::LayerNorm& ln, double eps = 1e-5) {
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    y.row(r) = ((x.row(r).array() - mean) / std::sqrt(var + eps)).matrix();
  }
  y = y.array().rowwise() * ln.gain->value.row(0).array();
  return y.rowwise() + ln.bias->value.row(0);
}

inline Mat gelu(const Mat& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); });
}

inline Mat softmax_rows(Mat s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
  return s;
}

/// softmax(Q K^T / sqrt(C)) V with a single head.
inline Mat literal_cross_attention(const Mat& q, const Mat& k, const Mat& v) {
  return softmax_rows(q * k.transpose() / std::sqrt(static_cast<double>(q.cols()))) * v;
}

inline Mat multihead(const Mat& q, const Mat& k, const Mat& v, int heads) {
  const Eigen::Index d = q.cols() / heads;
  Mat out(q.rows(), q.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat qh = q.middleCols(h * d, d), kh = k.middleCols(h * d, d), vh = v.middleCols(h * d, d);
    out.middleCols(h * d, d) = softmax_rows(qh * kh.transpose() / std::sqrt(static_cast<double>(d))) * vh;
  }
  return out;
}

/// Pre-norm transformer block (self-attention then feed-forward) built from
/// one branch's weights, ignoring its cross-attention sublayer.
inline Mat self_attention_block(const Mat& x, const BranchBlock& b, int heads) {
  const Mat n = layer_norm(x, b.ln_self);
  const Mat e = x + linear(multihead(linear(n, b.q), linear(n, b.k), linear(n, b.v), heads), b.o);
  return e + linear(gelu(linear(layer_norm(e, b.ln_ff), b.ff1)), b.ff2);
}

inline DenoiserConfig tiny_config(int vocab = 12) {
  DenoiserConfig c;
  c.layers = 2;
  c.heads = 2;
  c.width = 8;
  c.ff_mult = 2;
  c.num_objects = 2;
  c.num_joints = 2;
  c.geometry_width = 4;
  c.geometry_points = 6;
  c.vocab_size = vocab;
  c.diffusion_steps = 10;
  c.dropout = 0.0;
  return c;
}

/// Random well-formed inputs for a denoiser with config `c`.
struct DenoiserInputs {
  Mat xh, xo;
  MaskedCondition hc, oc;
  ConditionPack cond;
  int t = 3;
};

inline DenoiserInputs random_inputs(const DenoiserConfig& c, int frames, Rng& rng) {
  DenoiserInputs in;
  in.xh = test::random_mat(frames, c.human_width(), rng);
  in.xo = test::random_mat(frames, c.object_width(), rng);
  in.cond.k = 1;
  in.cond.text = "pick the box";
  in.cond.text_tokens = {2, 5, 7, 0, 0};
  in.cond.human_init = test::random_mat(1, c.human_width(), rng);
  in.cond.object_init = test::random_mat(1, c.object_width(), rng);
  for (int o = 0; o < c.num_objects; ++o) {
    ObjectGeometry g;
    g.name = "g" + std::to_string(o);
    g.bps_code = test::random_mat(c.geometry_points, 3, rng, 0.3);
    in.cond.geometry.push_back(g);
  }
  in.hc = build_condition_mask(frames, 1, in.cond.human_init);
  in.oc = build_condition_mask(frames, 1, in.cond.object_init);
  in.t = static_cast<int>(rng.index(static_cast<std::size_t>(c.diffusion_steps)));
  return in;
}

struct ProbeReport {
  int probes = 0;
  double max_relative_error = 0.0;
};

/// Scalar objective sum(Wh .* out_h) + sum(Wo .* out_o); compares the tape
/// gradient of `count` randomly chosen parameter scalars against central
/// differences.
inline ProbeReport denoiser_gradient_probes(Denoiser& model, const DenoiserInputs& in, int count,
                                            Rng& rng, double h = 1e-3) {
  const Mat wh = test::random_mat(in.xh.rows(), in.xh.cols(), rng);
  const Mat wo = test::random_mat(in.xo.rows(), in.xo.cols(), rng);
  auto objective = [&]() {
    nn::Tape tape;
    tape.set_grad_enabled(false);
    auto [oh, oo] = model.forward(tape, in.xh, in.xo, in.hc, in.oc, in.cond, in.t, false, nullptr);
    return (oh.value().array() * wh.array()).sum() + (oo.value().array() * wo.array()).sum();
  };
  model.params().zero_grad();
  {
    nn::Tape tape;
    auto [oh, oo] = model.forward(tape, in.xh, in.xo, in.hc, in.oc, in.cond, in.t, false, nullptr);
    tape.accumulate(oh.id, wh);
    tape.accumulate(oo.id, wo);
    tape.backward();
  }
  // Only parameters that influence this input (the null-text row does not).
  std::vector<nn::Parameter*> live;
  for (auto& p : model.params().all())
    if (p.grad.size() == p.value.size() && p.grad.cwiseAbs().maxCoeff() > 0.0) live.push_back(&p);
  ProbeReport report;
  for (int i = 0; i < count; ++i) {
    nn::Parameter& p = *live[rng.index(live.size())];
    const auto idx = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(p.value.size())));
    const double x0 = p.value.data()[idx];
    double v[4];
    const double steps[4] = {2 * h, h, -h, -2 * h};
    for (int k = 0; k < 4; ++k) {
      p.value.data()[idx] = x0 + steps[k];
      v[k] = objective();
    }
    p.value.data()[idx] = x0;
    const double fd = (-v[0] + 8 * v[1] - 8 * v[2] + v[3]) / (12 * h);
    const double err = test::relative_error(p.grad.data()[idx], fd, 1e-6);
    report.max_relative_error = std::max(report.max_relative_error, err);
    ++report.probes;
  }
  return report;
}

}  // namespace himo::ref
