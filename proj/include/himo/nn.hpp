#pragma once

#include <deque>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "himo/archive.hpp"
#include "himo/autodiff.hpp"

namespace himo::nn {

using ad::Parameter;
using ad::Tape;
using ad::Var;

/// Owns parameters in creation order; addresses are stable.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Mat value);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  std::size_t scalar_count() const;

  void zero_grad();
  /// Scales all gradients (used to average over a batch).
  void scale_grad(double s);
  double grad_norm() const;

  /// Parameters (and optionally Adam moments) as float64 tensors.
  void export_to(TensorFile& file, bool with_moments) const;
  /// Loads values by name; every parameter must be present with its shape.
  void import_from(const TensorFile& file, bool with_moments);

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

Mat xavier_uniform(Eigen::Index in, Eigen::Index out, Rng& rng);
Mat normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

struct Linear {
  Parameter* weight = nullptr;  // in x out
  Parameter* bias = nullptr;    // 1 x out

  static Linear create(ParameterStore& store, const std::string& name, Eigen::Index in,
                       Eigen::Index out, Rng& rng);
  static Linear bind(ParameterStore& store, const std::string& name);
  Var operator()(Tape& tape, Var x) const;
  Eigen::Index in() const { return weight->value.rows(); }
  Eigen::Index out() const { return weight->value.cols(); }
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;

  static LayerNorm create(ParameterStore& store, const std::string& name, Eigen::Index width);
  static LayerNorm bind(ParameterStore& store, const std::string& name);
  Var operator()(Tape& tape, Var x) const;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Decoupled weight decay coefficient (0 disables).
  double weight_decay = 0.0;
  /// Global gradient-norm clip (0 disables).
  double grad_clip = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}
  /// One update with learning rate `lr`; returns the pre-clip gradient norm.
  double step(ParameterStore& store, double lr);
  long long steps() const { return steps_; }
  void set_steps(long long s) { steps_ = s; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  long long steps_ = 0;
};

}  // namespace himo::nn
