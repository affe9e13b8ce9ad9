#include "himo/run_config.hpp"

#include <cmath>

#include <json.hpp>

#include "himo/archive.hpp"

namespace himo {

using json = nlohmann::json;
using I = std::int64_t;

const std::vector<RunConfig::Key>& RunConfig::schema() {
  static const std::vector<Key> keys = {
      {"profile", std::string("desk"), "named preset the other values started from"},
      {"seed", I{7}, "base seed for initialization, batching and noise"},
      // Denoiser
      {"layers", I{2}, "mutual-interaction blocks"},
      {"heads", I{4}, "self-attention heads"},
      {"width", I{128}, "transformer width C"},
      {"ff_mult", I{4}, "feed-forward width as a multiple of C"},
      {"dropout", 0.1, "dropout inside the denoiser"},
      {"geometry_width", I{64}, "geometry embedding width per object"},
      {"text_encoder", std::string("fallback"), "fallback | frozen"},
      {"frozen_embeddings", std::string(""), "JSON file of exported text vectors (frozen encoder)"},
      // Diffusion
      {"diffusion_steps", I{50}, "T_diff"},
      {"schedule", std::string("cosine"), "cosine | linear"},
      {"guidance_scale", 2.5, "classifier-free guidance at sampling time"},
      {"cond_drop", 0.1, "probability of replacing the text with the null embedding"},
      // Losses
      {"w_vel", 1.0, "velocity loss weight"},
      {"w_pos", 1.0, "joint position loss weight"},
      {"w_pen", 1.0, "penetration loss weight"},
      {"w_dis", 0.1, "object pairwise distance loss weight"},
      {"w_rec", 1.0, "MSE on the normalized clean-signal prediction"},
      {"loss_samples", I{256}, "object surface samples used by the penetration and distance losses"},
      // Optimizer
      {"lr", 1e-4, "Adam learning rate"},
      {"lr_decay", 0.99, "learning-rate multiplier applied once per epoch"},
      {"weight_decay", 0.0, "literal decoupled weight decay (0 disables)"},
      {"adam_beta1", 0.9, "Adam beta1"},
      {"adam_beta2", 0.999, "Adam beta2"},
      {"grad_clip", 1.0, "global gradient-norm clip (0 disables)"},
      {"batch_size", I{16}, "samples per step"},
      {"epochs", I{200}, "training epochs"},
      {"max_steps", I{0}, "stop after this many steps (0: epochs decide)"},
      // Data
      {"mode", std::string("full"), "full | segment"},
      {"max_frames", I{300}, "clip length limit"},
      {"max_text", I{40}, "token limit"},
      {"k_max", I{10}, "segment mode: past frames drawn uniformly from 1..k_max"},
      {"overfit", false, "reuse one fixed batch every step"},
      {"shuffle_objects", true, "permute object slots per sample"},
      // Bookkeeping
      {"checkpoint_every", I{10}, "epochs between checkpoints"},
      {"log_every", I{1}, "steps between log lines"},
      {"validate", true, "compute the validation loss after every epoch"},
      // Body fitting
      {"fit_alpha", 1.0, "joint term weight"},
      {"fit_lambda", 0.1, "smoothness term weight"},
      {"fit_gamma", 0.01, "pose regularizer weight"},
      {"fit_iterations", I{500}, "optimizer iterations"},
  };
  return keys;
}

const std::vector<std::string>& RunConfig::profile_names() {
  static const std::vector<std::string> names = {"desk", "fidelity", "overfit"};
  return names;
}

RunConfig RunConfig::profile(const std::string& name) {
  RunConfig c;
  for (const auto& k : schema()) c.values_[k.name] = k.fallback;
  if (name == "desk") {
  } else if (name == "fidelity") {
    c.values_["layers"] = I{8};
    c.values_["width"] = I{512};
    c.values_["diffusion_steps"] = I{1000};
    c.values_["batch_size"] = I{128};
  } else if (name == "overfit") {
    c.values_["overfit"] = true;
    c.values_["batch_size"] = I{1};
    c.values_["dropout"] = 0.0;
    c.values_["cond_drop"] = 0.0;
    c.values_["shuffle_objects"] = false;
    c.values_["lr_decay"] = 1.0;
    c.values_["max_steps"] = I{500};
    c.values_["validate"] = false;
    c.values_["checkpoint_every"] = I{100000};
  } else {
    fail(ErrorCode::kConfig, "config: unknown profile '" + name + "'");
  }
  c.values_["profile"] = name;
  return c;
}

bool RunConfig::known(const std::string& key) const { return values_.count(key) > 0; }

const RunConfig::Value& RunConfig::value(const std::string& key) const {
  auto it = values_.find(key);
  require(it != values_.end(), ErrorCode::kConfig, "config: unknown key '" + key + "'");
  return it->second;
}

void RunConfig::set_value(const std::string& key, const Value& v) {
  const Value& cur = value(key);
  if (cur.index() == v.index()) {
    values_[key] = v;
  } else if (std::holds_alternative<double>(cur) && std::holds_alternative<I>(v)) {
    values_[key] = static_cast<double>(std::get<I>(v));
  } else {
    fail(ErrorCode::kConfig, "config: wrong type for '" + key + "'");
  }
}

void RunConfig::set(const std::string& key, const std::string& text) {
  const Value& cur = value(key);
  try {
    std::size_t used = 0;
    if (std::holds_alternative<I>(cur)) {
      const long long v = std::stoll(text, &used);
      require(used == text.size(), ErrorCode::kConfig, "");
      values_[key] = static_cast<I>(v);
    } else if (std::holds_alternative<double>(cur)) {
      const double v = std::stod(text, &used);
      require(used == text.size(), ErrorCode::kConfig, "");
      values_[key] = v;
    } else if (std::holds_alternative<bool>(cur)) {
      if (text == "true" || text == "1") {
        values_[key] = true;
      } else if (text == "false" || text == "0") {
        values_[key] = false;
      } else {
        fail(ErrorCode::kConfig, "");
      }
    } else {
      values_[key] = text;
    }
  } catch (const std::exception&) {
    fail(ErrorCode::kConfig, "config: cannot parse '" + text + "' for key '" + key + "'");
  }
}

std::int64_t RunConfig::integer(const std::string& key) const {
  const Value& v = value(key);
  require(std::holds_alternative<I>(v), ErrorCode::kConfig, "config: '" + key + "' is not an integer");
  return std::get<I>(v);
}

double RunConfig::real(const std::string& key) const {
  const Value& v = value(key);
  require(std::holds_alternative<double>(v), ErrorCode::kConfig, "config: '" + key + "' is not a number");
  return std::get<double>(v);
}

bool RunConfig::flag(const std::string& key) const {
  const Value& v = value(key);
  require(std::holds_alternative<bool>(v), ErrorCode::kConfig, "config: '" + key + "' is not a flag");
  return std::get<bool>(v);
}

const std::string& RunConfig::text(const std::string& key) const {
  const Value& v = value(key);
  require(std::holds_alternative<std::string>(v), ErrorCode::kConfig,
          "config: '" + key + "' is not a string");
  return std::get<std::string>(v);
}

std::string RunConfig::to_json() const {
  json j = json::object();
  for (const auto& [k, v] : values_) std::visit([&](const auto& x) { j[k] = x; }, v);
  return j.dump(1);
}

void RunConfig::merge_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, std::string("config: ") + e.what());
  }
  require(j.is_object(), ErrorCode::kConfig, "config: expected a flat JSON object");
  for (const auto& [k, v] : j.items()) {
    require(known(k), ErrorCode::kConfig, "config: unknown key '" + k + "'");
    if (v.is_boolean()) {
      set_value(k, v.get<bool>());
    } else if (v.is_number_integer()) {
      set_value(k, static_cast<I>(v.get<long long>()));
    } else if (v.is_number()) {
      set_value(k, v.get<double>());
    } else if (v.is_string()) {
      set_value(k, v.get<std::string>());
    } else {
      fail(ErrorCode::kConfig, "config: '" + k + "' must be a scalar");
    }
  }
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, std::string("config: ") + e.what());
  }
  require(j.is_object(), ErrorCode::kConfig, "config: expected a flat JSON object");
  RunConfig c = profile(j.contains("profile") && j["profile"].is_string()
                            ? j["profile"].get<std::string>()
                            : "desk");
  c.merge_json(text);
  c.validate();
  return c;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return from_json(std::string(bytes.begin(), bytes.end()));
}

void RunConfig::validate() const {
  auto positive = [&](const char* k) {
    require(integer(k) >= 1, ErrorCode::kConfig, std::string("config: '") + k + "' must be >= 1");
  };
  for (const char* k : {"layers", "heads", "width", "ff_mult", "geometry_width", "batch_size",
                        "max_text", "k_max", "checkpoint_every", "log_every", "loss_samples"})
    positive(k);
  require(integer("diffusion_steps") >= 2, ErrorCode::kConfig, "config: diffusion_steps must be >= 2");
  require(integer("max_frames") >= 2, ErrorCode::kConfig, "config: max_frames must be >= 2");
  require(integer("epochs") >= 0 && integer("max_steps") >= 0 && integer("fit_iterations") >= 1,
          ErrorCode::kConfig, "config: negative step counts");
  require(integer("width") % integer("heads") == 0, ErrorCode::kConfig,
          "config: width must be divisible by heads");
  for (const char* k : {"dropout", "cond_drop"})
    require(real(k) >= 0 && real(k) < 1, ErrorCode::kConfig, std::string("config: '") + k + "' must lie in [0, 1)");
  for (const char* k : {"w_vel", "w_pos", "w_pen", "w_dis", "w_rec", "weight_decay", "grad_clip",
                        "fit_alpha", "fit_lambda", "fit_gamma"})
    require(real(k) >= 0, ErrorCode::kConfig, std::string("config: '") + k + "' must be >= 0");
  require(real("lr") > 0 && real("lr_decay") > 0 && real("lr_decay") <= 1, ErrorCode::kConfig,
          "config: need lr > 0 and 0 < lr_decay <= 1");
  require(text("mode") == "full" || text("mode") == "segment", ErrorCode::kConfig,
          "config: mode must be full or segment");
  require(text("schedule") == "cosine" || text("schedule") == "linear", ErrorCode::kConfig,
          "config: schedule must be cosine or linear");
  require(text("text_encoder") == "fallback" || text("text_encoder") == "frozen", ErrorCode::kConfig,
          "config: text_encoder must be fallback or frozen");
}

DenoiserConfig RunConfig::denoiser(int vocab_size, int num_objects, int num_joints) const {
  DenoiserConfig d;
  d.layers = static_cast<int>(integer("layers"));
  d.heads = static_cast<int>(integer("heads"));
  d.width = static_cast<int>(integer("width"));
  d.ff_mult = static_cast<int>(integer("ff_mult"));
  d.num_objects = num_objects;
  d.num_joints = num_joints;
  d.geometry_width = static_cast<int>(integer("geometry_width"));
  d.vocab_size = vocab_size;
  d.diffusion_steps = static_cast<int>(integer("diffusion_steps"));
  d.dropout = real("dropout");
  d.text_encoder = text("text_encoder");
  d.frozen_embeddings = text("frozen_embeddings");
  return d;
}

LossWeights RunConfig::loss_weights() const {
  return {real("w_vel"), real("w_pos"), real("w_pen"), real("w_dis")};
}

EnergyWeights RunConfig::fit_weights() const {
  return {real("fit_alpha"), real("fit_lambda"), real("fit_gamma")};
}

nn::AdamConfig RunConfig::adam() const {
  nn::AdamConfig a;
  a.learning_rate = real("lr");
  a.beta1 = real("adam_beta1");
  a.beta2 = real("adam_beta2");
  a.weight_decay = real("weight_decay");
  a.grad_clip = real("grad_clip");
  return a;
}

double RunConfig::learning_rate(long long epoch) const {
  return real("lr") * std::pow(real("lr_decay"), static_cast<double>(epoch));
}

}  // namespace himo
