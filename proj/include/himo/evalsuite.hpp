#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "himo/corpus.hpp"
#include "himo/diffusion.hpp"
#include "himo/nn.hpp"

namespace himo {

inline constexpr int kExtractorSchemaVersion = 1;

struct ExtractorConfig {
  int feature_width = 256;
  int hidden = 256;
  int embed = 128;
  double temperature = 0.07;
  int steps = 400;
  int batch_size = 16;
  double lr = 1e-3;
  int max_text = 40;
  int max_frames = 300;
  /// Probability that a training pair is a segment clip instead of a full sequence.
  double segment_fraction = 0.5;

  void validate() const;
};

/// Motion encoder (per-frame MLP, mean+max pooling, linear) and text encoder
/// (token embedding, per-token MLP, mean+max pooling, linear). Both outputs are
/// unit-norm rows of width `feature_width`.
class FeatureExtractors {
 public:
  FeatureExtractors(ExtractorConfig config, int vocab_size, int motion_width, NormStats stats,
                    std::uint64_t seed);
  FeatureExtractors(const FeatureExtractors&) = delete;
  FeatureExtractors& operator=(const FeatureExtractors&) = delete;
  FeatureExtractors(FeatureExtractors&&) = default;

  const ExtractorConfig& config() const { return config_; }
  int motion_width() const { return motion_width_; }
  int vocab_size() const { return vocab_size_; }
  nn::ParameterStore& params() { return store_; }
  const nn::ParameterStore& params() const { return store_; }

  /// `human` is T x D_h and `objects` T x N_o*9, both raw.
  nn::Var motion(nn::Tape& tape, const Mat& human, const Mat& objects) const;
  nn::Var text(nn::Tape& tape, const std::vector<int>& tokens) const;
  Mat motion_feature(const Mat& human, const Mat& objects) const;
  Mat text_feature(const std::vector<int>& tokens) const;

  void save(const std::filesystem::path& dir) const;
  static FeatureExtractors load(const std::filesystem::path& dir);

 private:
  ExtractorConfig config_;
  int vocab_size_;
  int motion_width_;
  NormStats stats_;
  nn::ParameterStore store_;
  nn::Linear m1_, m2_, m_out_, t1_, t_out_;
  nn::Parameter* table_ = nullptr;
};

/// Symmetric InfoNCE over a batch of matched rows (B x d each). Writes the
/// gradients w.r.t. both inputs when requested.
double contrastive_loss(const Mat& motion, const Mat& text, double temperature,
                        Mat* grad_motion = nullptr, Mat* grad_text = nullptr);

struct ExtractorTrainLog {
  std::vector<double> loss;
};

/// Adam on the contrastive objective over train-split pairs. Throws
/// kNumerical when the loss goes non-finite.
FeatureExtractors train_extractors(const Corpus& corpus, const ExtractorConfig& config,
                                   std::uint64_t seed, ExtractorTrainLog* log = nullptr);

// ---------------------------------------------------------------------------
// Metrics

struct MetricStat {
  double mean = 0.0;
  double ci95 = 0.0;  // 1.96 sigma / sqrt(R)
  int repetitions = 0;
  std::vector<double> values;
};

MetricStat summarize(const std::vector<double>& values);

struct MetricReport {
  std::map<std::string, MetricStat> metrics;
  std::map<std::string, std::string> config;  // recorded protocol settings
  std::string to_json() const;
};

/// Fraction of anchors whose true text ranks in the top `top_k` (Euclidean)
/// against `pool_size - 1` random distractor texts. One value per repetition.
std::vector<double> r_precision(const Mat& motion, const Mat& text, int pool_size, int top_k,
                                int repetitions, std::uint64_t seed);

Mat feature_mean(const Mat& features);
/// Unbiased covariance plus `jitter` on the diagonal.
Mat feature_covariance(const Mat& features, double jitter = 1e-6);
/// Frechet distance between Gaussian fits of two feature sets.
double fid(const Mat& a, const Mat& b);
/// Frechet distance from moments; tr sqrt(S_a S_b) via sqrt(S_a) S_b sqrt(S_a).
double frechet_distance(const Vec& mu_a, const Mat& cov_a, const Vec& mu_b, const Mat& cov_b);

double mm_dist(const Mat& motion, const Mat& text);
/// Mean distance between two disjoint random subsets of size min(subset, n/2).
double diversity(const Mat& features, int subset_size, std::uint64_t seed);
/// Mean over texts of the average pairwise distance among that text's samples
/// (`per_text[i]` is S x d).
double multimodality(const std::vector<Mat>& per_text);

/// One evaluation pair: the condition an output is generated from and the
/// reference motion it is compared against.
struct EvalItem {
  std::string text;
  std::vector<int> tokens;      // extractor tokens
  ConditionPack condition;      // denoiser-side condition (first frame)
  int frames = 0;
  Mat human, objects;           // ground truth, raw
};

std::vector<EvalItem> eval_items(const Corpus& corpus, const std::string& split, int max_text,
                                 int max_frames);

struct EvalOptions {
  int repetitions = 20;
  int pool_size = 32;
  int top_k = 3;
  int diversity_subset = 50;
  int mm_samples = 10;
  int mm_texts = 10;
  double guidance_scale = 2.5;
  std::uint64_t seed = 7;
};

/// Produces raw (human, objects) for an item; `seed` varies per call.
using Generator = std::function<SampleResult(const EvalItem&, std::uint64_t seed)>;

/// Full battery. With a null generator the ground truth stands in for the
/// generated set (the "Real" row).
MetricReport evaluate(const FeatureExtractors& extractors, const std::vector<EvalItem>& items,
                      const Generator& generator, const EvalOptions& options);

}  // namespace himo
