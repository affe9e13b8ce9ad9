#pragma once

#include <string>
#include <vector>

#include "himo/motion_repr.hpp"

namespace himo {

struct DiffusionSchedule {
  std::string kind;
  int steps = 0;
  Vec beta;
  Vec alpha;
  Vec alpha_bar;
};

/// "cosine" (default, s = 0.008, beta clipped to 0.999) or "linear"
/// (beta_start..beta_end).
DiffusionSchedule make_schedule(const std::string& kind, int steps, double beta_start = 1e-4,
                                double beta_end = 2e-2);

/// sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) noise.
Mat q_sample(const Mat& x0, int t, const Mat& noise, const DiffusionSchedule& schedule);

struct MaskedCondition {
  Mat values;     // T x D, rows >= k zero
  Vec indicator;  // T, 1 on conditioned rows

  /// T x (D + 1) with the indicator as the last column.
  Mat stacked() const;
};

/// Places `init_frames` (k x D) at rows [0, k) of a T-row zero matrix.
MaskedCondition build_condition_mask(int frames, int k, const Mat& init_frames);

/// Sampling inputs: text, the first k raw (unnormalized) frames and geometry.
struct ConditionPack {
  std::string text;
  std::vector<int> text_tokens;
  Mat human_init;   // k x D_h
  Mat object_init;  // k x (N_o * 9)
  std::vector<ObjectGeometry> geometry;
  int k = 1;

  int num_objects() const { return static_cast<int>(geometry.size()); }
  void validate(int frames) const;
};

/// Network contract used by the sampler. Inputs and outputs live in
/// normalized feature space; `drop_text` selects the null text embedding.
class DenoiserInterface {
 public:
  virtual ~DenoiserInterface() = default;
  virtual int human_width() const = 0;
  virtual int num_objects() const = 0;
  virtual const NormStats& stats() const = 0;
  virtual void predict_x0(const Mat& noised_human, const Mat& noised_objects,
                          const MaskedCondition& human_cond, const MaskedCondition& object_cond,
                          const ConditionPack& condition, int t, bool drop_text, Mat* x0_human,
                          Mat* x0_objects) const = 0;
};

struct SampleResult {
  Mat human;    // T x D_h, raw units
  Mat objects;  // T x (N_o * 9), raw units
  int denoiser_calls = 0;
};

/// Normalizes the raw condition and builds both masked conditions.
void prepare_conditions(const DenoiserInterface& model, const ConditionPack& condition,
                        int frames, MaskedCondition* human, MaskedCondition* objects);

/// Ancestral DDPM with x0 prediction. guidance_scale 1 uses only the
/// conditional prediction, 0 only the unconditional one, anything else both
/// (u + s (c - u)). Rotations are projected to valid 6D, then the first k
/// frames are overwritten with the raw condition.
SampleResult sample(const DenoiserInterface& model, const ConditionPack& condition, int frames,
                    const DiffusionSchedule& schedule, std::uint64_t seed,
                    double guidance_scale = 2.5);

/// Re-projects every 6D block of a human feature matrix (widths 9J+3) and of a
/// packed object matrix onto valid rotations.
void project_rotations(Mat& human, int num_joints, Mat& objects);

}  // namespace himo
