#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "himo/denoiser.hpp"
#include "himo/losses.hpp"
#include "himo/nn.hpp"
#include "himo/rigid_fit.hpp"

namespace himo {

/// Flat, typed key-value configuration. Every key has a declared type and a
/// default; unknown keys are rejected.
class RunConfig {
 public:
  using Value = std::variant<std::int64_t, double, bool, std::string>;

  struct Key {
    std::string name;
    Value fallback;
    std::string doc;
  };
  static const std::vector<Key>& schema();
  static const std::vector<std::string>& profile_names();

  /// "desk" (default), "fidelity" or "overfit".
  static RunConfig profile(const std::string& name = "desk");

  bool known(const std::string& key) const;
  /// Parses `text` according to the key's type.
  void set(const std::string& key, const std::string& text);
  void set_value(const std::string& key, const Value& value);
  const Value& value(const std::string& key) const;

  std::int64_t integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  const std::string& text(const std::string& key) const;

  std::string to_json() const;
  /// A flat JSON object. A "profile" entry, when present, is applied first.
  static RunConfig from_json(const std::string& json);
  static RunConfig from_file(const std::filesystem::path& path);
  /// Overrides from another flat JSON object onto this config.
  void merge_json(const std::string& json);

  void validate() const;

  DenoiserConfig denoiser(int vocab_size, int num_objects, int num_joints = 24) const;
  LossWeights loss_weights() const;
  EnergyWeights fit_weights() const;
  nn::AdamConfig adam() const;
  /// lr * lr_decay^epoch.
  double learning_rate(long long epoch) const;

  const std::map<std::string, Value>& values() const { return values_; }

 private:
  std::map<std::string, Value> values_;
};

}  // namespace himo
