#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "himo/run_config.hpp"
#include "test_util.hpp"

namespace himo {
namespace {

TEST(RunConfig, DefaultWeights) {
  const RunConfig c = RunConfig::profile();
  const LossWeights w = c.loss_weights();
  EXPECT_EQ(w.vel, 1.0);
  EXPECT_EQ(w.pos, 1.0);
  EXPECT_EQ(w.pen, 1.0);
  EXPECT_EQ(w.dis, 0.1);
  const EnergyWeights f = c.fit_weights();
  EXPECT_EQ(f.joint, 1.0);
  EXPECT_EQ(f.smooth, 0.1);
  EXPECT_EQ(f.reg, 0.01);
  EXPECT_EQ(c.real("lr"), 1e-4);
  EXPECT_EQ(c.real("lr_decay"), 0.99);
  EXPECT_EQ(c.text("profile"), "desk");
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, Profiles) {
  for (const auto& name : RunConfig::profile_names()) {
    const RunConfig c = RunConfig::profile(name);
    EXPECT_EQ(c.text("profile"), name);
    EXPECT_NO_THROW(c.validate());
  }
  const RunConfig f = RunConfig::profile("fidelity");
  EXPECT_EQ(f.integer("layers"), 8);
  EXPECT_EQ(f.integer("width"), 512);
  EXPECT_EQ(f.integer("diffusion_steps"), 1000);
  EXPECT_EQ(f.integer("batch_size"), 128);
  const RunConfig o = RunConfig::profile("overfit");
  EXPECT_TRUE(o.flag("overfit"));
  EXPECT_EQ(o.integer("batch_size"), 1);
  EXPECT_EQ(o.real("dropout"), 0.0);
  EXPECT_THROW(RunConfig::profile("huge"), Error);
}

TEST(RunConfig, TypedSetParsing) {
  RunConfig c = RunConfig::profile();
  c.set("layers", "3");
  c.set("lr", "2e-4");
  c.set("overfit", "true");
  c.set("mode", "segment");
  EXPECT_EQ(c.integer("layers"), 3);
  EXPECT_EQ(c.real("lr"), 2e-4);
  EXPECT_TRUE(c.flag("overfit"));
  EXPECT_EQ(c.text("mode"), "segment");
  for (auto [k, v] : {std::pair{"layers", "3.5"}, {"lr", "fast"}, {"overfit", "yes"}, {"layers", ""}}) {
    try {
      c.set(k, v);
      ADD_FAILURE() << k << "=" << v;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kConfig);
    }
  }
  try {
    c.set("no_such_key", "1");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
  EXPECT_THROW(c.integer("lr"), Error);
}

TEST(RunConfig, JsonRoundTripAndProfileFirst) {
  RunConfig c = RunConfig::profile("overfit");
  c.set("width", "64");
  c.set("w_dis", "0.25");
  const RunConfig back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.values(), c.values());

  const RunConfig p = RunConfig::from_json(R"({"profile": "fidelity", "layers": 4})");
  EXPECT_EQ(p.integer("layers"), 4);
  EXPECT_EQ(p.integer("width"), 512);
  // Integers are accepted for real-valued keys.
  EXPECT_EQ(RunConfig::from_json(R"({"lr": 1})").real("lr"), 1.0);
  EXPECT_THROW(RunConfig::from_json(R"({"bogus": 1})"), Error);
  EXPECT_THROW(RunConfig::from_json(R"({"layers": "two"})"), Error);
  EXPECT_THROW(RunConfig::from_json(R"([1, 2])"), Error);
  EXPECT_THROW(RunConfig::from_json("{oops"), Error);

  const auto dir = test::temp_dir("run_config");
  std::ofstream(dir / "c.json") << R"({"heads": 2, "width": 32})";
  EXPECT_EQ(RunConfig::from_file(dir / "c.json").integer("width"), 32);
  EXPECT_THROW(RunConfig::from_file(dir / "missing.json"), Error);
}

TEST(RunConfig, ValidationRejectsBadValues) {
  const std::vector<std::pair<std::string, std::string>> bad = {
      {"heads", "3"}, {"dropout", "1.0"}, {"lr", "0"}, {"lr_decay", "1.5"}, {"mode", "both"},
      {"schedule", "quadratic"}, {"diffusion_steps", "1"}, {"w_pen", "-1"}, {"loss_samples", "0"}};
  for (const auto& [k, v] : bad) {
    RunConfig c = RunConfig::profile();
    c.set(k, v);
    EXPECT_THROW(c.validate(), Error) << k << "=" << v;
  }
}

TEST(RunConfig, LearningRateDecaysPerEpoch) {
  RunConfig c = RunConfig::profile();
  EXPECT_EQ(c.learning_rate(0), 1e-4);
  EXPECT_NEAR(c.learning_rate(10), 1e-4 * std::pow(0.99, 10), 1e-18);
  c.set("lr_decay", "1");
  EXPECT_EQ(c.learning_rate(100), 1e-4);
}

TEST(RunConfig, DenoiserAndAdamMapping) {
  RunConfig c = RunConfig::profile();
  c.set("grad_clip", "0.5");
  const DenoiserConfig d = c.denoiser(30, 3);
  EXPECT_EQ(d.vocab_size, 30);
  EXPECT_EQ(d.num_objects, 3);
  EXPECT_EQ(d.num_joints, 24);
  EXPECT_EQ(d.width, 128);
  EXPECT_EQ(d.diffusion_steps, 50);
  const nn::AdamConfig a = c.adam();
  EXPECT_EQ(a.learning_rate, 1e-4);
  EXPECT_EQ(a.grad_clip, 0.5);
}

}  // namespace
}  // namespace himo
