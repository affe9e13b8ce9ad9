#pragma once

#include <functional>
#include <string>
#include <vector>

#include "himo/motion_repr.hpp"

namespace himo::ad {

/// Trainable tensor. `grad` accumulates across backward passes until cleared;
/// `m`/`v` hold optimizer moments.
struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  Mat m;
  Mat v;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Reverse-mode recorder over dense double matrices. Nodes are appended in
/// evaluation order; `backward` replays them in reverse.
class Tape {
 public:
  Var constant(Mat value);
  /// Leaf bound to a parameter; its gradient is added to `p.grad` on backward.
  Var param(Parameter& p);
  /// Internal: records a computed node.
  Var record(Mat value, std::vector<int> inputs, std::function<void(const Mat&)> back);

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Zero-size when no gradient reached the node.
  const Mat& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  void accumulate(int id, const Mat& g);

  /// Seeds d(out)/d(out) = 1 for a 1x1 node, then runs the reverse pass.
  void backward(Var scalar);
  /// Reverse pass from whatever seeds were placed with `accumulate`.
  void backward();

  /// With gradients disabled, parameter leaves are recorded as constants.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void(const Mat&)> back;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// Element-wise and structural ops. All inputs must live on the same tape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var add_const(Var a, const Mat& c);
Var mul_const(Var a, const Mat& c);  // Hadamard with a constant
Var matmul(Var a, Var b);
/// x W + b with W (in x out) and b (1 x out) broadcast over rows.
Var linear(Var x, Var w, Var b);
Var gelu(Var a);
/// Row-wise normalization with per-column gain and bias (1 x C each).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Row-wise L2 normalization.
Var normalize_rows(Var a, double eps = 1e-12);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
/// Rows of `table` selected by `ids`.
Var gather_rows(Var table, const std::vector<int>& ids);
Var mean_rows(Var a);  // 1 x C
Var max_rows(Var a);   // 1 x C
/// Repeats a 1 x C row `n` times.
Var repeat_row(Var row, Eigen::Index n);
/// Inverted dropout with a constant mask drawn from `rng`.
Var dropout(Var a, double p, Rng& rng);
Var sum_all(Var a);  // 1 x 1

/// Multi-head scaled dot-product attention, heads split along columns.
/// out_h = softmax(scale * Q_h K_h^T) V_h. Optionally exposes the per-head
/// probability matrices.
Var attention(Var q, Var k, Var v, int heads, double scale, std::vector<Mat>* probs = nullptr);

}  // namespace himo::ad
