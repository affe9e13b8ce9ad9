#include "himo/composer.hpp"

#include <json.hpp>

namespace himo {

using json = nlohmann::json;

int TimelineScript::total_length() const {
  int total = 0;
  for (int l : lengths) total += l;
  return total - (segments() - 1) * k;
}

void TimelineScript::validate() const {
  require(!prompts.empty(), ErrorCode::kInvalidArgument, "script: needs at least one segment");
  require(prompts.size() == lengths.size(), ErrorCode::kShapeMismatch,
          "script: prompts and lengths differ in count");
  require(k >= 1, ErrorCode::kInvalidArgument, "script: k must be >= 1");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    require(lengths[i] > k, ErrorCode::kInvalidArgument,
            "script: segment " + std::to_string(i) + " is not longer than k");
  }
}

TimelineScript TimelineScript::from_json(const std::string& text, int k) {
  TimelineScript s;
  s.k = k;
  try {
    const json j = json::parse(text);
    require(j.is_array(), ErrorCode::kFormat, "script: expected a JSON list");
    for (const auto& e : j) {
      s.prompts.push_back(e.at("text").get<std::string>());
      s.lengths.push_back(e.value("length", kDefaultSegmentLength));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("script: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

Mat3 slot_rotation(const Mat& objects, Eigen::Index row, Eigen::Index slot) {
  return rot6d_to_matrix_stable(objects.block<1, 6>(row, slot * kObjectFeatureWidth).transpose());
}

void set_slot_rotation(Mat& objects, Eigen::Index row, Eigen::Index slot, const Mat3& r) {
  objects.block<1, 6>(row, slot * kObjectFeatureWidth) << r(0, 0), r(1, 0), r(2, 0), r(0, 1),
      r(1, 1), r(2, 1);
}

}  // namespace

SampleResult generate_segment(const DenoiserInterface& model, const Vocabulary& vocab,
                              const std::string& prompt, int length, const Mat& past_human,
                              const Mat& past_objects,
                              const std::vector<ObjectGeometry>& geometry,
                              const DiffusionSchedule& schedule, std::uint64_t seed,
                              const ComposeOptions& options) {
  const int k = static_cast<int>(past_human.rows());
  require(k >= 1 && k < length, ErrorCode::kInvalidArgument,
          "segment: need 1 <= k < clip length (k=" + std::to_string(k) +
              ", length=" + std::to_string(length) + ")");
  require(past_objects.rows() == k, ErrorCode::kShapeMismatch,
          "segment: past human and object frames differ in count");
  const TokenizedText tokens = vocab.encode(prompt, options.max_text);
  require(tokens.length > 0, ErrorCode::kInvalidArgument, "segment: prompt has no tokens");
  const auto n = static_cast<Eigen::Index>(geometry.size());
  require(past_objects.cols() == n * kObjectFeatureWidth, ErrorCode::kShapeMismatch,
          "segment: object frames do not match the geometry count");

  // Rebase every object on its pose at the clip's first frame.
  ConditionPack cond;
  cond.text = prompt;
  cond.text_tokens = tokens.ids;
  cond.k = k;
  cond.human_init = past_human;
  cond.object_init = past_objects;
  std::vector<Mat3> base(static_cast<std::size_t>(n));
  for (Eigen::Index o = 0; o < n; ++o) {
    const Mat3 b = slot_rotation(past_objects, 0, o);
    base[static_cast<std::size_t>(o)] = b;
    for (int r = 0; r < k; ++r)
      set_slot_rotation(cond.object_init, r, o, slot_rotation(past_objects, r, o) * b.transpose());
    set_slot_rotation(cond.object_init, 0, o, Mat3::Identity());
    cond.geometry.push_back(b.isApprox(Mat3::Identity(), 1e-15)
                                ? geometry[static_cast<std::size_t>(o)]
                                : rotate_geometry(geometry[static_cast<std::size_t>(o)], b,
                                                  default_bps_basis()));
  }

  SampleResult out = sample(model, cond, length, schedule, seed, options.guidance_scale);
  for (Eigen::Index o = 0; o < n; ++o)
    for (int r = 0; r < length; ++r)
      set_slot_rotation(out.objects, r, o,
                        slot_rotation(out.objects, r, o) * base[static_cast<std::size_t>(o)]);
  out.objects.topRows(k) = past_objects;
  return out;
}

ComposedTimeline compose_timeline(const DenoiserInterface& model, const Vocabulary& vocab,
                                  const TimelineScript& script, const InitialState& initial,
                                  const DiffusionSchedule& schedule, std::uint64_t seed,
                                  const ComposeOptions& options, ComposedTimeline* partial) {
  script.validate();
  require(initial.human.rows() >= 1 && initial.human.rows() == initial.objects.rows(),
          ErrorCode::kShapeMismatch, "compose: initial state needs matching human/object rows");
  ComposedTimeline local;
  ComposedTimeline& tl = partial ? *partial : local;
  tl = ComposedTimeline{};
  tl.geometry = initial.geometry;
  const int total = script.total_length();
  tl.human.resize(total, initial.human.cols());
  tl.objects.resize(total, initial.objects.cols());

  int offset = 0;
  for (int i = 0; i < script.segments(); ++i) {
    const int len = script.lengths[static_cast<std::size_t>(i)];
    const std::string& prompt = script.prompts[static_cast<std::size_t>(i)];
    Mat past_h, past_o;
    if (i == 0) {
      past_h = initial.human;
      past_o = initial.objects;
    } else {
      past_h = tl.human.middleRows(offset, script.k);
      past_o = tl.objects.middleRows(offset, script.k);
    }
    SampleResult clip;
    try {
      clip = generate_segment(model, vocab, prompt, len, past_h, past_o, tl.geometry, schedule,
                              derive_seed(seed, static_cast<std::uint64_t>(i)), options);
    } catch (const Error& e) {
      fail(e.code(), "compose: segment " + std::to_string(i) + " failed after " +
                         std::to_string(i) + " completed segment(s): " + e.what());
    }
    const int keep_from = i == 0 ? 0 : script.k;
    tl.human.middleRows(offset + keep_from, len - keep_from) = clip.human.bottomRows(len - keep_from);
    tl.objects.middleRows(offset + keep_from, len - keep_from) =
        clip.objects.bottomRows(len - keep_from);
    tl.offsets.push_back(offset);
    if (i > 0) tl.boundaries.push_back(offset + script.k);
    tl.clip_human.push_back(std::move(clip.human));
    tl.clip_objects.push_back(std::move(clip.objects));
    tl.denoiser_calls += clip.denoiser_calls;
    offset += len - script.k;
  }
  const int joints = (static_cast<int>(tl.human.cols()) - 3) / 9;
  tl.transition = transition_jerk(tl.human.leftCols(3 * joints), tl.boundaries);
  return partial ? *partial : std::move(local);
}

std::vector<double> transition_jerk(const Mat& positions, const std::vector<int>& boundaries,
                                    int window) {
  require(positions.cols() % 3 == 0, ErrorCode::kShapeMismatch,
          "transition_jerk: positions must be T x 3J");
  const int T = static_cast<int>(positions.rows());
  const Eigen::Index J = positions.cols() / 3;
  std::vector<double> out;
  for (int b : boundaries) {
    require(b >= 0 && b < T, ErrorCode::kOutOfRange, "transition_jerk: boundary outside timeline");
    double worst = 0.0;
    for (int t = std::max(1, b - window); t <= std::min(T - 2, b + window); ++t) {
      const RowVec acc = positions.row(t + 1) - 2.0 * positions.row(t) + positions.row(t - 1);
      for (Eigen::Index j = 0; j < J; ++j) worst = std::max(worst, acc.segment<3>(3 * j).norm());
    }
    out.push_back(worst);
  }
  return out;
}

HoiSequence timeline_to_sequence(const ComposedTimeline& timeline, const TimelineScript& script,
                                 int num_joints, double fps, const std::string& id) {
  HoiSequence seq;
  seq.id = id;
  seq.human = HumanMotion::unflatten(timeline.human, num_joints, fps);
  for (std::size_t o = 0; o < timeline.geometry.size(); ++o) {
    ObjectTrack t;
    const Mat block = timeline.objects.middleCols(static_cast<Eigen::Index>(o) * kObjectFeatureWidth,
                                                  kObjectFeatureWidth);
    t.rotation = block.leftCols(6);
    t.translation = block.rightCols(3);
    t.geometry = timeline.geometry[o];
    seq.objects.push_back(std::move(t));
  }
  std::vector<std::string> texts;
  for (int i = 0; i < script.segments(); ++i) {
    const int start = i == 0 ? 0 : timeline.boundaries[static_cast<std::size_t>(i) - 1];
    const int end = i + 1 < script.segments() ? timeline.boundaries[static_cast<std::size_t>(i)]
                                              : timeline.frames();
    seq.segments.push_back({start, end, script.prompts[static_cast<std::size_t>(i)]});
    texts.push_back(script.prompts[static_cast<std::size_t>(i)]);
  }
  std::string text;
  for (std::size_t i = 0; i < texts.size(); ++i) text += (i ? " " : "") + texts[i];
  seq.text = text;
  seq.validate();
  return seq;
}

}  // namespace himo
