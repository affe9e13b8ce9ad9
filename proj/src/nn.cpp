#include "himo/nn.hpp"

#include <cmath>

namespace himo::nn {

Parameter& ParameterStore::add(const std::string& name, Mat value) {
  require(!contains(name), ErrorCode::kInvalidArgument, "duplicate parameter name: " + name);
  Parameter p;
  p.name = name;
  p.grad = Mat::Zero(value.rows(), value.cols());
  p.m = Mat::Zero(value.rows(), value.cols());
  p.v = Mat::Zero(value.rows(), value.cols());
  p.value = std::move(value);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::kFormat, "unknown parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorCode::kFormat, "unknown parameter: " + name);
  return params_[it->second];
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

void ParameterStore::scale_grad(double s) {
  for (auto& p : params_) p.grad *= s;
}

double ParameterStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) s += p.grad.squaredNorm();
  return std::sqrt(s);
}

void ParameterStore::export_to(TensorFile& file, bool with_moments) const {
  auto dims = [](const Mat& m) {
    return std::vector<std::uint32_t>{static_cast<std::uint32_t>(m.rows()),
                                      static_cast<std::uint32_t>(m.cols())};
  };
  for (const auto& p : params_) {
    file.add(Tensor::from_matrix("param/" + p.name, p.value, dims(p.value), DType::kFloat64));
    if (with_moments) {
      file.add(Tensor::from_matrix("adam_m/" + p.name, p.m, dims(p.m), DType::kFloat64));
      file.add(Tensor::from_matrix("adam_v/" + p.name, p.v, dims(p.v), DType::kFloat64));
    }
  }
}

void ParameterStore::import_from(const TensorFile& file, bool with_moments) {
  for (auto& p : params_) {
    const std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(p.value.rows()),
                                          static_cast<std::uint32_t>(p.value.cols())};
    p.value = file.matrix("param/" + p.name, dims);
    if (with_moments) {
      p.m = file.matrix("adam_m/" + p.name, dims);
      p.v = file.matrix("adam_v/" + p.name, dims);
    }
  }
}

Mat xavier_uniform(Eigen::Index in, Eigen::Index out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Mat w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-a, a);
  return w;
}

Mat normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Mat w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = stddev * rng.normal();
  return w;
}

Linear Linear::create(ParameterStore& store, const std::string& name, Eigen::Index in,
                      Eigen::Index out, Rng& rng) {
  Linear l;
  l.weight = &store.add(name + ".weight", xavier_uniform(in, out, rng));
  l.bias = &store.add(name + ".bias", Mat::Zero(1, out));
  return l;
}

Linear Linear::bind(ParameterStore& store, const std::string& name) {
  return {&store.get(name + ".weight"), &store.get(name + ".bias")};
}

Var Linear::operator()(Tape& tape, Var x) const {
  return ad::linear(x, tape.param(*weight), tape.param(*bias));
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& name, Eigen::Index width) {
  LayerNorm n;
  n.gain = &store.add(name + ".gain", Mat::Ones(1, width));
  n.bias = &store.add(name + ".bias", Mat::Zero(1, width));
  return n;
}

LayerNorm LayerNorm::bind(ParameterStore& store, const std::string& name) {
  return {&store.get(name + ".gain"), &store.get(name + ".bias")};
}

Var LayerNorm::operator()(Tape& tape, Var x) const {
  return ad::layer_norm(x, tape.param(*gain), tape.param(*bias));
}

double Adam::step(ParameterStore& store, double lr) {
  const double norm = store.grad_norm();
  require(std::isfinite(norm), ErrorCode::kNumerical, "adam: non-finite gradient");
  const double clip =
      (config_.grad_clip > 0.0 && norm > config_.grad_clip) ? config_.grad_clip / norm : 1.0;
  ++steps_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (auto& p : store.all()) {
    const Mat g = clip * p.grad;
    p.m = config_.beta1 * p.m + (1.0 - config_.beta1) * g;
    p.v = config_.beta2 * p.v + (1.0 - config_.beta2) * g.cwiseAbs2();
    if (config_.weight_decay > 0.0) p.value *= 1.0 - lr * config_.weight_decay;
    p.value.array() -=
        lr * (p.m.array() / c1) / ((p.v.array() / c2).sqrt() + config_.eps);
  }
  return norm;
}

}  // namespace himo::nn
