#pragma once

#include <string>
#include <vector>

#include "himo/corpus.hpp"
#include "himo/diffusion.hpp"

namespace himo {

inline constexpr int kDefaultOverlap = 10;
inline constexpr int kDefaultSegmentLength = 100;

struct TimelineScript {
  std::vector<std::string> prompts;
  std::vector<int> lengths;
  int k = kDefaultOverlap;

  int segments() const { return static_cast<int>(prompts.size()); }
  /// Sum of lengths minus (m - 1) k.
  int total_length() const;
  void validate() const;
  /// JSON list of {"text": ..., "length": ...}; a missing length defaults to 100.
  static TimelineScript from_json(const std::string& json, int k = kDefaultOverlap);
};

/// Raw first frame (or frames) of the timeline plus object geometry. Object
/// rotations are relative to `geometry`.
struct InitialState {
  Mat human;    // k0 x D_h
  Mat objects;  // k0 x N_o*9
  std::vector<ObjectGeometry> geometry;
};

struct ComposeOptions {
  double guidance_scale = 2.5;
  int max_text = 15;
};

/// One clip: the first rows of `past_*` become the condition. Object
/// rotations in and out are relative to `geometry`; the clip is expressed in
/// its own rebased frame internally, as during training.
SampleResult generate_segment(const DenoiserInterface& model, const Vocabulary& vocab,
                              const std::string& prompt, int length, const Mat& past_human,
                              const Mat& past_objects,
                              const std::vector<ObjectGeometry>& geometry,
                              const DiffusionSchedule& schedule, std::uint64_t seed,
                              const ComposeOptions& options = {});

struct ComposedTimeline {
  Mat human;    // total_length x D_h
  Mat objects;  // total_length x N_o*9
  std::vector<ObjectGeometry> geometry;
  std::vector<int> offsets;     // timeline row of each clip's first frame
  std::vector<int> boundaries;  // first newly generated row of clip i >= 1
  std::vector<double> transition;  // transition_jerk per boundary
  std::vector<Mat> clip_human, clip_objects;  // each clip as generated
  int denoiser_calls = 0;

  int frames() const { return static_cast<int>(human.rows()); }
};

/// Segment 0 is conditioned on every row of `initial` (usually one); segment
/// i > 0 on the last k rows of clip i-1.
/// Each stitch keeps the earlier clip's copy of the overlap. On failure an
/// Error is thrown and `partial` (when given) keeps the completed clips.
ComposedTimeline compose_timeline(const DenoiserInterface& model, const Vocabulary& vocab,
                                  const TimelineScript& script, const InitialState& initial,
                                  const DiffusionSchedule& schedule, std::uint64_t seed,
                                  const ComposeOptions& options = {},
                                  ComposedTimeline* partial = nullptr);

/// Per boundary: max over joints and frames t in [b - window, b + window] of
/// |p[t+1] - 2 p[t] + p[t-1]| (m / frame^2). `positions` is T x 3J.
std::vector<double> transition_jerk(const Mat& positions, const std::vector<int>& boundaries,
                                    int window = 3);

/// Archive view of a timeline: one segment per clip, split at the boundaries.
HoiSequence timeline_to_sequence(const ComposedTimeline& timeline, const TimelineScript& script,
                                 int num_joints, double fps, const std::string& id);

}  // namespace himo
