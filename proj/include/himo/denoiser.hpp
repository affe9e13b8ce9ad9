#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "himo/diffusion.hpp"
#include "himo/nn.hpp"

namespace himo {

struct DenoiserConfig {
  int layers = 8;
  int heads = 4;
  int width = 512;
  int ff_mult = 4;
  int num_objects = 2;
  int num_joints = 24;
  int geometry_width = 64;
  int vocab_size = 2;
  int diffusion_steps = 1000;
  double dropout = 0.1;
  /// "fallback" (trainable token embedding) or "frozen" (exported vectors).
  std::string text_encoder = "fallback";
  std::filesystem::path frozen_embeddings;
  int geometry_points = kDefaultBasisPoints;

  int human_width() const { return human_feature_width(num_joints); }
  int object_width() const { return num_objects * kObjectFeatureWidth; }
  void validate() const;
};

/// Text -> 1 x C row on a tape.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual nn::Var encode(nn::Tape& tape, const std::vector<int>& tokens,
                         const std::string& text) const = 0;
};

/// Embedding table, mean over non-pad tokens (pad id 0; an empty text uses the
/// pad row), then a two-layer MLP.
class FallbackTextEncoder final : public TextEncoder {
 public:
  FallbackTextEncoder(nn::ParameterStore& store, int vocab, int width, Rng& rng);
  nn::Var encode(nn::Tape& tape, const std::vector<int>& tokens,
                 const std::string& text) const override;

 private:
  nn::Parameter* table_;
  nn::Linear fc1_, fc2_;
  int vocab_;
};

/// Looks texts up in a JSON file {"dim": d, "embeddings": {text: [d floats]}}
/// and maps them through a trainable linear layer. Unknown texts are errors.
class FrozenTextEncoder final : public TextEncoder {
 public:
  FrozenTextEncoder(nn::ParameterStore& store, const std::filesystem::path& file, int width,
                    Rng* rng);
  nn::Var encode(nn::Tape& tape, const std::vector<int>& tokens,
                 const std::string& text) const override;
  int dim() const { return dim_; }

 private:
  std::map<std::string, Mat> table_;
  int dim_ = 0;
  nn::Linear proj_;
};

/// Sinusoidal features of a scalar position (1 x width): sin in the first
/// half, cos in the second.
Mat sinusoidal_features(double position, int width);
/// Rows 0..count-1 of the positional table.
Mat positional_encoding(int count, int width);

/// Intermediate values of one mutual block, for inspection.
struct BlockTrace {
  Mat human_in, object_in;           // H^(i), O^(i)
  Mat human_self, object_self;       // e_h, e_o
  Mat human_cross, object_cross;     // cross-attention sub-outputs
  Mat human_cross_probs, object_cross_probs;
  std::vector<Mat> human_self_probs, object_self_probs;
};

struct ForwardTrace {
  Mat condition_token;
  std::vector<BlockTrace> blocks;
};

/// Per-branch parameters of one block.
struct BranchBlock {
  nn::LayerNorm ln_self, ln_cross, ln_ff;
  nn::Linear q, k, v, o;           // self-attention
  nn::Linear cross_q, cross_k, cross_v;
  nn::Linear ff1, ff2;
};

class Denoiser final : public DenoiserInterface {
 public:
  /// Fresh initialization.
  Denoiser(DenoiserConfig config, std::uint64_t seed);
  /// Seed-0 initialization, meant to be overwritten by `params().import_from`.
  explicit Denoiser(DenoiserConfig config);
  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;

  const DenoiserConfig& config() const { return config_; }
  nn::ParameterStore& params() { return store_; }
  const nn::ParameterStore& params() const { return store_; }
  void set_stats(NormStats stats) { stats_ = std::move(stats); }

  int human_width() const override { return config_.human_width(); }
  int num_objects() const override { return config_.num_objects; }
  const NormStats& stats() const override { return stats_; }

  nn::Var encode_text(nn::Tape& tape, const std::vector<int>& tokens,
                      const std::string& text) const;
  Mat encode_text(const std::vector<int>& tokens, const std::string& text = {}) const;
  /// Timestep MLP concatenated with the text row, projected to 1 x C.
  nn::Var embed_conditions(nn::Tape& tape, nn::Var text_embedding, int t) const;
  nn::Var null_text(nn::Tape& tape) const;

  /// One mutual block on (T+1) x C streams.
  std::pair<nn::Var, nn::Var> mutual_block_forward(nn::Tape& tape, int layer, nn::Var human,
                                                   nn::Var objects, Rng* dropout_rng,
                                                   BlockTrace* trace = nullptr) const;

  /// x0 predictions (T x D_h, T x N_o*9) in normalized space. `dropout_rng`
  /// enables training-mode dropout.
  std::pair<nn::Var, nn::Var> forward(nn::Tape& tape, const Mat& noised_human,
                                      const Mat& noised_objects, const MaskedCondition& human_cond,
                                      const MaskedCondition& object_cond,
                                      const ConditionPack& condition, int t, bool drop_text,
                                      Rng* dropout_rng, ForwardTrace* trace = nullptr) const;

  void predict_x0(const Mat& noised_human, const Mat& noised_objects,
                  const MaskedCondition& human_cond, const MaskedCondition& object_cond,
                  const ConditionPack& condition, int t, bool drop_text, Mat* x0_human,
                  Mat* x0_objects) const override;

  const BranchBlock& block(int layer, bool human) const {
    return (human ? human_blocks_ : object_blocks_)[static_cast<std::size_t>(layer)];
  }

 private:
  void build(Rng* rng);

  DenoiserConfig config_;
  nn::ParameterStore store_;
  NormStats stats_;
  std::unique_ptr<TextEncoder> text_;
  nn::Parameter* null_text_ = nullptr;
  nn::Linear time1_, time2_, cond_proj_;
  nn::Linear geometry_, human_in_, object_in_;
  std::vector<BranchBlock> human_blocks_, object_blocks_;
  nn::LayerNorm human_out_ln_, object_out_ln_;
  nn::Linear human_out_, object_out_;
};

/// Flattened BPS code of each geometry (1 x 3S rows), row-major per point.
Mat geometry_rows(const std::vector<ObjectGeometry>& geometry, int points);

}  // namespace himo
