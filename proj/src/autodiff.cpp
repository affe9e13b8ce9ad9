#include "himo/autodiff.hpp"

#include <cmath>
#include <numbers>

namespace himo::ad {

const Mat& Var::value() const { return tape->value(id); }

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  if (grad_enabled_) {
    n.requires_grad = true;
    n.param = &p;
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Mat value, std::vector<int> inputs, std::function<void(const Mat&)> back) {
  Node n;
  n.value = std::move(value);
  for (int i : inputs) n.requires_grad = n.requires_grad || requires_grad(i);
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  require(g.rows() == n.value.rows() && g.cols() == n.value.cols(), ErrorCode::kShapeMismatch,
          "autodiff: gradient shape differs from node value");
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(Var scalar) {
  require(scalar.tape == this, ErrorCode::kInvalidArgument, "autodiff: node from another tape");
  require(value(scalar.id).size() == 1, ErrorCode::kShapeMismatch,
          "autodiff: backward(Var) needs a scalar");
  accumulate(scalar.id, Mat::Ones(1, 1));
  backward();
}

void Tape::backward() {
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].grad.size() == 0) continue;
    if (nodes_[i].param) {
      Parameter& p = *nodes_[i].param;
      if (p.grad.size() == 0) p.grad = Mat::Zero(p.value.rows(), p.value.cols());
      p.grad += nodes_[i].grad;
    }
    if (nodes_[i].back) nodes_[i].back(nodes_[i].grad);
  }
}

// ---------------------------------------------------------------------------

namespace {

Tape& same_tape(Var a, Var b) {
  require(a.tape && a.tape == b.tape, ErrorCode::kInvalidArgument,
          "autodiff: operands on different tapes");
  return *a.tape;
}

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::kShapeMismatch,
          std::string("autodiff ") + op + ": shape mismatch");
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a.value(), b.value(), "add");
  const int ia = a.id, ib = b.id;
  return t.record(a.value() + b.value(), {ia, ib}, [&t, ia, ib](const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a.value(), b.value(), "sub");
  const int ia = a.id, ib = b.id;
  return t.record(a.value() - b.value(), {ia, ib}, [&t, ia, ib](const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.record(s * a.value(), {ia}, [&t, ia, s](const Mat& g) { t.accumulate(ia, s * g); });
}

Var add_const(Var a, const Mat& c) {
  check_same_shape(a.value(), c, "add_const");
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.record(a.value() + c, {ia}, [&t, ia](const Mat& g) { t.accumulate(ia, g); });
}

Var mul_const(Var a, const Mat& c) {
  check_same_shape(a.value(), c, "mul_const");
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.record(a.value().cwiseProduct(c), {ia},
                  [&t, ia, c](const Mat& g) { t.accumulate(ia, g.cwiseProduct(c)); });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require(a.cols() == b.rows(), ErrorCode::kShapeMismatch, "autodiff matmul: inner dims differ");
  const int ia = a.id, ib = b.id;
  return t.record(a.value() * b.value(), {ia, ib}, [&t, ia, ib](const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var linear(Var x, Var w, Var b) {
  Tape& t = same_tape(x, w);
  same_tape(x, b);
  require(x.cols() == w.rows(), ErrorCode::kShapeMismatch, "autodiff linear: input width differs");
  require(b.rows() == 1 && b.cols() == w.cols(), ErrorCode::kShapeMismatch,
          "autodiff linear: bias must be 1 x out");
  Mat y = x.value() * w.value();
  y.rowwise() += b.value().row(0);
  const int ix = x.id, iw = w.id, ib = b.id;
  return t.record(std::move(y), {ix, iw, ib}, [&t, ix, iw, ib](const Mat& g) {
    if (t.requires_grad(ix)) t.accumulate(ix, g * t.value(iw).transpose());
    if (t.requires_grad(iw)) t.accumulate(iw, t.value(ix).transpose() * g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

Var gelu(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  const Mat& x = a.value();
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  Mat y = x.unaryExpr([inv_sqrt2](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); });
  return t.record(std::move(y), {ia}, [&t, ia, inv_sqrt2](const Mat& g) {
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    const Mat d = t.value(ia).unaryExpr([&](double v) {
      return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = same_tape(x, gain);
  same_tape(x, bias);
  const Mat& v = x.value();
  const Eigen::Index c = v.cols();
  require(gain.rows() == 1 && gain.cols() == c && bias.rows() == 1 && bias.cols() == c,
          ErrorCode::kShapeMismatch, "autodiff layer_norm: gain/bias must be 1 x C");
  const Vec mean = v.rowwise().mean();
  Mat xc = v.colwise() - mean;
  const Vec inv_std =
      ((xc.array().square().rowwise().sum() / static_cast<double>(c)) + eps).rsqrt().matrix();
  Mat xhat = xc.array().colwise() * inv_std.array();
  Mat y = xhat.array().rowwise() * gain.value().row(0).array();
  y.rowwise() += bias.value().row(0);
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return t.record(std::move(y), {ix, ig, ib},
                  [&t, ix, ig, ib, xhat = std::move(xhat), inv_std, c](const Mat& g) {
                    if (t.requires_grad(ig))
                      t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                    if (!t.requires_grad(ix)) return;
                    const Mat dxhat = g.array().rowwise() * t.value(ig).row(0).array();
                    const Vec m1 = dxhat.rowwise().mean();
                    const Vec m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / static_cast<double>(c);
                    Mat dx = dxhat;
                    dx.colwise() -= m1;
                    dx -= (xhat.array().colwise() * m2.array()).matrix();
                    dx = dx.array().colwise() * inv_std.array();
                    t.accumulate(ix, dx);
                  });
}

Var normalize_rows(Var a, double eps) {
  Tape& t = *a.tape;
  const Mat& v = a.value();
  const Vec norms = (v.rowwise().squaredNorm().array() + eps).sqrt().matrix();
  Mat y = v.array().colwise() / norms.array();
  const int ia = a.id;
  Mat yc = y;
  return t.record(std::move(y), {ia}, [&t, ia, yc = std::move(yc), norms](const Mat& g) {
    const Vec dots = g.cwiseProduct(yc).rowwise().sum();
    Mat dx = g - (yc.array().colwise() * dots.array()).matrix();
    dx = dx.array().colwise() / norms.array();
    t.accumulate(ia, dx);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "autodiff concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (Var p : parts) {
    same_tape(parts[0], p);
    require(p.rows() == rows, ErrorCode::kShapeMismatch, "autodiff concat_cols: row counts differ");
    cols += p.cols();
    ids.push_back(p.id);
    widths.push_back(p.cols());
  }
  Mat y(rows, cols);
  Eigen::Index off = 0;
  for (Var p : parts) {
    y.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return t.record(std::move(y), ids, [&t, ids, widths](const Mat& g) {
    Eigen::Index o = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) t.accumulate(ids[i], g.middleCols(o, widths[i]));
      o += widths[i];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "autodiff concat_rows: no inputs");
  Tape& t = *parts[0].tape;
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  for (Var p : parts) {
    same_tape(parts[0], p);
    require(p.cols() == cols, ErrorCode::kShapeMismatch, "autodiff concat_rows: widths differ");
    rows += p.rows();
    ids.push_back(p.id);
    heights.push_back(p.rows());
  }
  Mat y(rows, cols);
  Eigen::Index off = 0;
  for (Var p : parts) {
    y.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return t.record(std::move(y), ids, [&t, ids, heights](const Mat& g) {
    Eigen::Index o = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) t.accumulate(ids[i], g.middleRows(o, heights[i]));
      o += heights[i];
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), ErrorCode::kOutOfRange,
          "autodiff slice_rows: range outside input");
  Tape& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return t.record(a.value().middleRows(start, count), {ia},
                  [&t, ia, start, count, rows, cols](const Mat& g) {
                    Mat full = Mat::Zero(rows, cols);
                    full.middleRows(start, count) = g;
                    t.accumulate(ia, full);
                  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorCode::kOutOfRange,
          "autodiff slice_cols: range outside input");
  Tape& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return t.record(a.value().middleCols(start, count), {ia},
                  [&t, ia, start, count, rows, cols](const Mat& g) {
                    Mat full = Mat::Zero(rows, cols);
                    full.middleCols(start, count) = g;
                    t.accumulate(ia, full);
                  });
}

Var gather_rows(Var table, const std::vector<int>& ids) {
  Tape& t = *table.tape;
  const Mat& v = table.value();
  Mat y(static_cast<Eigen::Index>(ids.size()), v.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < v.rows(), ErrorCode::kOutOfRange,
            "autodiff gather_rows: index outside table");
    y.row(static_cast<Eigen::Index>(i)) = v.row(ids[i]);
  }
  const int it = table.id;
  const Eigen::Index rows = v.rows(), cols = v.cols();
  return t.record(std::move(y), {it}, [&t, it, ids, rows, cols](const Mat& g) {
    Mat full = Mat::Zero(rows, cols);
    for (std::size_t i = 0; i < ids.size(); ++i) full.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(it, full);
  });
}

Var mean_rows(Var a) {
  require(a.rows() > 0, ErrorCode::kShapeMismatch, "autodiff mean_rows: empty input");
  Tape& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index rows = a.rows();
  return t.record(a.value().colwise().mean(), {ia}, [&t, ia, rows](const Mat& g) {
    t.accumulate(ia, g.replicate(rows, 1) / static_cast<double>(rows));
  });
}

Var max_rows(Var a) {
  require(a.rows() > 0, ErrorCode::kShapeMismatch, "autodiff max_rows: empty input");
  Tape& t = *a.tape;
  const Mat& v = a.value();
  Mat y(1, v.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(v.cols()));
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    Eigen::Index r = 0;
    y(0, c) = v.col(c).maxCoeff(&r);
    arg[static_cast<std::size_t>(c)] = r;
  }
  const int ia = a.id;
  const Eigen::Index rows = v.rows();
  return t.record(std::move(y), {ia}, [&t, ia, arg, rows](const Mat& g) {
    Mat full = Mat::Zero(rows, g.cols());
    for (Eigen::Index c = 0; c < g.cols(); ++c) full(arg[static_cast<std::size_t>(c)], c) = g(0, c);
    t.accumulate(ia, full);
  });
}

Var repeat_row(Var row, Eigen::Index n) {
  require(row.rows() == 1, ErrorCode::kShapeMismatch, "autodiff repeat_row: input must be 1 x C");
  Tape& t = *row.tape;
  const int ir = row.id;
  return t.record(row.value().replicate(n, 1), {ir},
                  [&t, ir](const Mat& g) { t.accumulate(ir, g.colwise().sum()); });
}

Var dropout(Var a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  require(p < 1.0, ErrorCode::kInvalidArgument, "autodiff dropout: rate must be < 1");
  Mat mask(a.rows(), a.cols());
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < p ? 0.0 : keep;
  return mul_const(a, mask);
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  const int ia = a.id;
  const Eigen::Index rows = a.rows(), cols = a.cols();
  Mat y(1, 1);
  y(0, 0) = a.value().sum();
  return t.record(std::move(y), {ia}, [&t, ia, rows, cols](const Mat& g) {
    t.accumulate(ia, Mat::Constant(rows, cols, g(0, 0)));
  });
}

namespace {

void softmax_rows(Mat& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

}  // namespace

Var attention(Var q, Var k, Var v, int heads, double scale_factor, std::vector<Mat>* probs) {
  Tape& t = same_tape(q, k);
  same_tape(q, v);
  const Eigen::Index width = q.cols();
  require(heads >= 1 && width % heads == 0, ErrorCode::kShapeMismatch,
          "autodiff attention: width not divisible by heads");
  require(k.cols() == width && v.cols() == width && k.rows() == v.rows(), ErrorCode::kShapeMismatch,
          "autodiff attention: q/k/v shapes disagree");
  const Eigen::Index dh = width / heads;
  const Mat& qv = q.value();
  const Mat& kv = k.value();
  const Mat& vv = v.value();
  std::vector<Mat> p(static_cast<std::size_t>(heads));
  Mat out(qv.rows(), width);
  for (int h = 0; h < heads; ++h) {
    Mat s = scale_factor * qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose();
    softmax_rows(s);
    out.middleCols(h * dh, dh) = s * vv.middleCols(h * dh, dh);
    p[static_cast<std::size_t>(h)] = std::move(s);
  }
  if (probs) *probs = p;
  const int iq = q.id, ik = k.id, iv = v.id;
  return t.record(std::move(out), {iq, ik, iv},
                  [&t, iq, ik, iv, p = std::move(p), heads, dh, scale_factor](const Mat& g) {
                    const Mat& qv = t.value(iq);
                    const Mat& kv = t.value(ik);
                    const Mat& vv = t.value(iv);
                    Mat dq = Mat::Zero(qv.rows(), qv.cols());
                    Mat dk = Mat::Zero(kv.rows(), kv.cols());
                    Mat dv = Mat::Zero(vv.rows(), vv.cols());
                    for (int h = 0; h < heads; ++h) {
                      const Mat& ph = p[static_cast<std::size_t>(h)];
                      const auto gh = g.middleCols(h * dh, dh);
                      dv.middleCols(h * dh, dh) = ph.transpose() * gh;
                      const Mat dp = gh * vv.middleCols(h * dh, dh).transpose();
                      const Vec rs = dp.cwiseProduct(ph).rowwise().sum();
                      Mat ds = ph.cwiseProduct(dp.colwise() - rs);
                      ds *= scale_factor;
                      dq.middleCols(h * dh, dh) = ds * kv.middleCols(h * dh, dh);
                      dk.middleCols(h * dh, dh) = ds.transpose() * qv.middleCols(h * dh, dh);
                    }
                    t.accumulate(iq, dq);
                    t.accumulate(ik, dk);
                    t.accumulate(iv, dv);
                  });
}

}  // namespace himo::ad
