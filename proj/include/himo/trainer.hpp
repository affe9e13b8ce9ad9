#pragma once

#include <filesystem>
#include <memory>
#include <ostream>
#include <string>

#include "himo/body_model.hpp"
#include "himo/corpus.hpp"
#include "himo/denoiser.hpp"
#include "himo/diffusion.hpp"
#include "himo/run_config.hpp"

namespace himo {

inline constexpr int kCheckpointSchemaVersion = 1;

struct StepLosses {
  double total = 0.0;
  double rec = 0.0;
  LossParts parts;
};

/// Losses of one sample's clean-signal prediction. Predictions are in
/// normalized space; `grad_*` (optional) receive d(total)/d(prediction) in
/// the same space.
StepLosses sample_losses(const Mat& pred_human, const Mat& pred_objects, const Sample& sample,
                         const NormStats& stats, const BodyModel& body, const RunConfig& config,
                         Mat* grad_human = nullptr, Mat* grad_objects = nullptr);

struct StepReport {
  long long step = 0;
  long long epoch = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  StepLosses losses;  // batch means
};

/// Checkpoint contents restored by `load_checkpoint`.
struct Checkpoint {
  RunConfig config;
  Vocabulary vocab;
  std::unique_ptr<Denoiser> model;
  long long step = 0;
  long long adam_steps = 0;
  double best_val = 0.0;
};

void save_checkpoint(const std::filesystem::path& dir, const Denoiser& model,
                     const RunConfig& config, const Vocabulary& vocab, long long step,
                     long long adam_steps, double best_val);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

class Trainer {
 public:
  Trainer(const Corpus& corpus, RunConfig config);
  /// Continues from a checkpoint written by `save`.
  static std::unique_ptr<Trainer> resume(const Corpus& corpus, const std::filesystem::path& dir);

  /// One optimizer step. Throws kNumerical (before touching the weights) when
  /// the loss or gradient is not finite.
  StepReport step();
  /// Mean total loss over the validation split (train when it is empty) at a
  /// fixed seed, without dropout or text dropout.
  double validation_loss() const;

  /// Runs until `max_steps` (or the configured epochs), writing log.jsonl,
  /// last/ and best/ under `out_dir`. On a non-finite loss the run stops and
  /// the error names the last good checkpoint.
  void run(const std::filesystem::path& out_dir, std::ostream* progress = nullptr);

  void save(const std::filesystem::path& dir) const;

  Denoiser& model() { return *model_; }
  const Denoiser& model() const { return *model_; }
  const RunConfig& config() const { return config_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  long long steps_done() const { return step_; }
  long long steps_per_epoch() const { return steps_per_epoch_; }
  long long total_steps() const;
  /// The batch `step` trains on (the same one every step in overfit mode).
  Batch batch_for(long long step) const;

 private:

  const Corpus& corpus_;
  RunConfig config_;
  ToyBodyModel body_;
  std::unique_ptr<Denoiser> model_;
  nn::Adam adam_;
  DiffusionSchedule schedule_;
  LoadOptions load_;
  long long step_ = 0;
  long long steps_per_epoch_ = 1;
  double best_val_ = 0.0;
  bool has_best_ = false;
};

}  // namespace himo
