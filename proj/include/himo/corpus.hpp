#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "himo/body_model.hpp"
#include "himo/motion_repr.hpp"

namespace himo {

inline constexpr int kPadToken = 0;
inline constexpr int kUnknownToken = 1;
inline constexpr int kCorpusSchemaVersion = 1;

struct SplitRatios {
  double train = 0.8;
  double test = 0.15;
  double val = 0.05;
};

struct CorpusConfig {
  int num_sequences = 16;
  int num_objects = 2;
  int min_frames = 60;
  int max_frames = 90;
  int min_segments = 2;
  int max_segments = 3;
  int min_segment_frames = 20;
  double fps = 15.0;
  int surface_samples = kDefaultSurfaceSamples;
  std::uint64_t seed = 7;
  SplitRatios ratios;

  void validate() const;
};

/// Lower-cased words and single punctuation marks.
std::vector<std::string> tokenize(const std::string& text);

struct TokenizedText {
  std::vector<int> ids;  // length == max_len, padded with kPadToken
  int max_len = 0;
  int length = 0;        // tokens before padding
};

class Vocabulary {
 public:
  Vocabulary();
  /// Pad and unk first, then the sorted set of tokens.
  static Vocabulary build(const std::vector<std::string>& texts);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  /// Truncates to max_len; unseen tokens map to kUnknownToken.
  TokenizedText encode(const std::string& text, int max_len) const;

  std::string to_json() const;
  static Vocabulary from_json(const std::string& json);

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

struct CorpusManifest {
  int schema_version = kCorpusSchemaVersion;
  double fps = 15.0;
  int num_objects = 2;
  int num_joints = 24;
  std::uint64_t seed = 0;
  std::vector<std::string> ids;
  std::vector<std::string> splits;  // parallel to ids: "train" | "test" | "val"
  std::vector<std::string> object_vocabulary;

  std::vector<std::string> split_ids(const std::string& split) const;
  std::string to_json() const;
  static CorpusManifest from_json(const std::string& json);
};

/// floor(n * ratio) per split; empty splits then receive one of the leftover
/// sequences (train, test, val order), and anything still left goes by
/// largest fractional part.
std::array<int, 3> split_counts(int n, const SplitRatios& ratios);
CorpusManifest split_dataset(CorpusManifest manifest, const SplitRatios& ratios, std::uint64_t seed);

/// Per-segment bookkeeping emitted by the generator.
struct ScriptedAction {
  int object = 0;
  bool left_hand = true;
  int grasp_frame = 0;
  int release_frame = 0;
};

struct GeneratedSequence {
  HoiSequence sequence;
  std::vector<ScriptedAction> actions;  // one per segment
  double height_m = 0.0;                // stature the body shape was drawn from
  double weight_kg = 0.0;
};

/// One scripted sequence. Deterministic in (config.seed, index).
GeneratedSequence generate_sequence(const CorpusConfig& config, int index,
                                    const ToyBodyModel& model, const Mat& basis);

/// Writes one archive per sequence plus manifest.json, vocab.json and
/// norm.bin (train-split statistics) into `out_dir`.
CorpusManifest generate_synthetic_corpus(const CorpusConfig& config,
                                         const std::filesystem::path& out_dir);

/// Mean/std over all frames of the given sequences; std floored at kStdFloor.
NormStats compute_norm_stats(const std::vector<const HoiSequence*>& sequences);
void write_norm_stats(const std::filesystem::path& path, const NormStats& stats);
NormStats read_norm_stats(const std::filesystem::path& path);

struct LoadOptions {
  /// "full": whole sequence, k = 1, full text. "segment": one segment clip
  /// prefixed by up to k past frames, segment text.
  std::string mode = "full";
  int max_frames = 300;
  int max_text = 40;
  int k_max = 10;
  /// When > 0, every segment clip uses exactly this k.
  int fixed_k = 0;
  bool shuffle_objects = true;

  static LoadOptions full() { return {}; }
  static LoadOptions segment() { return {"segment", 100, 15, 10, 0, true}; }
};

struct Sample {
  std::string id;
  std::string text;
  TokenizedText tokens;
  int length = 0;   // valid frames
  int k = 1;        // conditioned frames
  Mat human;        // max_len x D_h, normalized, zero past `length`
  Mat objects;      // max_len x N_o*9, normalized
  Mat human_raw;    // length x D_h
  Mat objects_raw;  // length x N_o*9
  Vec mask;         // max_len
  std::vector<ObjectGeometry> geometry;
  std::vector<int> object_order;  // slot -> original object index
};

struct Batch {
  std::vector<Sample> samples;
  int max_len = 0;
};

/// An on-disk corpus held in memory.
class Corpus {
 public:
  static Corpus load(const std::filesystem::path& dir);

  const CorpusManifest& manifest() const { return manifest_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const NormStats& stats() const { return stats_; }
  const HoiSequence& sequence(const std::string& id) const;
  std::vector<const HoiSequence*> split(const std::string& name) const;

  /// One training sample. For "segment" mode `segment` picks the segment
  /// (-1 draws one at random).
  Sample make_sample(const HoiSequence& seq, const LoadOptions& options, Rng& rng,
                     int segment = -1) const;
  /// batch_size sequences from a seeded permutation of the split; object
  /// order and segment choice also follow the seed.
  Batch load_batch(const std::string& split, int batch_size, std::uint64_t seed,
                   const LoadOptions& options = {}) const;

  /// In-memory construction (tests).
  static Corpus from_sequences(std::vector<HoiSequence> sequences, CorpusManifest manifest);

 private:
  CorpusManifest manifest_;
  Vocabulary vocab_;
  NormStats stats_;
  std::map<std::string, HoiSequence> sequences_;
};

/// Packs tracks into T x (N_o * 9) following `order` (slot -> object index).
Mat pack_objects(const std::vector<ObjectTrack>& objects, const std::vector<int>& order);

/// Minimum-jerk blend s(tau) = 10 tau^3 - 15 tau^4 + 6 tau^5.
double min_jerk(double tau);

}  // namespace himo
