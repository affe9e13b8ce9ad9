#include "himo/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "himo/archive.hpp"

namespace himo {

namespace fs = std::filesystem;
using json = nlohmann::json;

void CorpusConfig::validate() const {
  require(num_sequences >= 1, ErrorCode::kConfig, "corpus: num_sequences must be >= 1");
  require(num_objects >= 1 && num_objects <= 6, ErrorCode::kConfig,
          "corpus: num_objects must be in [1, 6]");
  require(min_frames >= 1 && min_frames <= max_frames, ErrorCode::kConfig,
          "corpus: need 1 <= min_frames <= max_frames");
  require(min_segments >= 1 && min_segments <= max_segments, ErrorCode::kConfig,
          "corpus: need 1 <= min_segments <= max_segments");
  require(min_segment_frames >= 10, ErrorCode::kConfig, "corpus: min_segment_frames must be >= 10");
  require(max_segments * min_segment_frames <= min_frames, ErrorCode::kUnsatisfiable,
          "corpus: max_segments * min_segment_frames exceeds min_frames");
  require(fps > 0.0 && surface_samples >= 1, ErrorCode::kConfig, "corpus: bad fps or sample count");
  require(ratios.train >= 0 && ratios.test >= 0 && ratios.val >= 0 &&
              std::abs(ratios.train + ratios.test + ratios.val - 1.0) < 1e-6,
          ErrorCode::kConfig, "corpus: split ratios must be non-negative and sum to 1");
}

// ---------------------------------------------------------------------------
// Text

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(word);
    word.clear();
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) || c == '\'') {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      if (std::ispunct(c)) out.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<unk>"};
  index_ = {{"<pad>", kPadToken}, {"<unk>", kUnknownToken}};
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> seen;
  for (const auto& t : texts)
    for (auto& w : tokenize(t)) seen.insert(w);
  Vocabulary v;
  for (const auto& w : seen) {
    if (v.index_.count(w)) continue;
    v.index_[w] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(w);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnknownToken : it->second;
}

const std::string& Vocabulary::token(int id) const {
  require(id >= 0 && id < size(), ErrorCode::kOutOfRange, "vocabulary: token id out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenizedText Vocabulary::encode(const std::string& text, int max_len) const {
  require(max_len >= 1, ErrorCode::kInvalidArgument, "vocabulary: max_len must be >= 1");
  TokenizedText out;
  out.max_len = max_len;
  out.ids.assign(static_cast<std::size_t>(max_len), kPadToken);
  const auto words = tokenize(text);
  out.length = std::min<int>(max_len, static_cast<int>(words.size()));
  for (int i = 0; i < out.length; ++i) out.ids[static_cast<std::size_t>(i)] = id(words[i]);
  return out;
}

std::string Vocabulary::to_json() const { return json{{"tokens", tokens_}}.dump(1); }

Vocabulary Vocabulary::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("vocabulary: ") + e.what());
  }
  require(j.contains("tokens") && j["tokens"].is_array(), ErrorCode::kFormat,
          "vocabulary: missing tokens array");
  auto tokens = j["tokens"].get<std::vector<std::string>>();
  require(tokens.size() >= 2 && tokens[0] == "<pad>" && tokens[1] == "<unk>", ErrorCode::kFormat,
          "vocabulary: first entries must be <pad> and <unk>");
  Vocabulary v;
  v.tokens_ = tokens;
  v.index_.clear();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    require(v.index_.emplace(tokens[i], static_cast<int>(i)).second, ErrorCode::kFormat,
            "vocabulary: duplicate token '" + tokens[i] + "'");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Manifest and splits

std::vector<std::string> CorpusManifest::split_ids(const std::string& split) const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (splits[i] == split) out.push_back(ids[i]);
  return out;
}

std::string CorpusManifest::to_json() const {
  json seqs = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i)
    seqs.push_back({{"id", ids[i]}, {"split", i < splits.size() ? splits[i] : ""}});
  json j{{"schema_version", schema_version}, {"fps", fps},
         {"num_objects", num_objects},       {"num_joints", num_joints},
         {"seed", seed},                     {"object_vocabulary", object_vocabulary},
         {"sequences", seqs}};
  return j.dump(1);
}

CorpusManifest CorpusManifest::from_json(const std::string& text) {
  CorpusManifest m;
  try {
    const json j = json::parse(text);
    m.schema_version = j.at("schema_version").get<int>();
    require(m.schema_version == kCorpusSchemaVersion, ErrorCode::kVersionMismatch,
            "manifest: unsupported schema_version " + std::to_string(m.schema_version));
    m.fps = j.at("fps").get<double>();
    m.num_objects = j.at("num_objects").get<int>();
    m.num_joints = j.at("num_joints").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.object_vocabulary = j.at("object_vocabulary").get<std::vector<std::string>>();
    for (const auto& s : j.at("sequences")) {
      m.ids.push_back(s.at("id").get<std::string>());
      m.splits.push_back(s.at("split").get<std::string>());
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("manifest: ") + e.what());
  }
  return m;
}

std::array<int, 3> split_counts(int n, const SplitRatios& ratios) {
  const std::array<double, 3> r{ratios.train, ratios.test, ratios.val};
  require(r[0] >= 0 && r[1] >= 0 && r[2] >= 0 && std::abs(r[0] + r[1] + r[2] - 1.0) <= 1e-9,
          ErrorCode::kInvalidArgument, "split: ratios must be non-negative and sum to 1");
  const int wanted = (r[0] > 0) + (r[1] > 0) + (r[2] > 0);
  require(n >= wanted, ErrorCode::kInvalidArgument,
          "split: " + std::to_string(n) + " sequences cannot fill " + std::to_string(wanted) +
              " splits");
  std::array<int, 3> c{};
  std::array<double, 3> frac{};
  int left = n;
  for (int i = 0; i < 3; ++i) {
    const double exact = n * r[i];
    c[i] = static_cast<int>(std::floor(exact + 1e-9));
    frac[i] = exact - c[i];
    left -= c[i];
  }
  // Every split with a positive ratio gets at least one sequence, taken from
  // the remainder first and from the largest split otherwise.
  for (int i = 0; i < 3; ++i) {
    if (c[i] != 0 || r[i] <= 0) continue;
    if (left > 0) {
      --left;
    } else {
      --*std::max_element(c.begin(), c.end());
    }
    ++c[i];
    frac[i] = -1.0;
  }
  while (left > 0) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (frac[i] > frac[best]) best = i;
    ++c[best];
    frac[best] = -1.0;
    --left;
  }
  return c;
}

CorpusManifest split_dataset(CorpusManifest manifest, const SplitRatios& ratios,
                             std::uint64_t seed) {
  const int n = static_cast<int>(manifest.ids.size());
  const auto counts = split_counts(n, ratios);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(derive_seed(seed, 0x5e11));
  rng.shuffle(order);
  manifest.splits.assign(static_cast<std::size_t>(n), "");
  static const char* names[3] = {"train", "test", "val"};
  int cursor = 0;
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < counts[s]; ++i)
      manifest.splits[static_cast<std::size_t>(order[static_cast<std::size_t>(cursor++)])] = names[s];
  return manifest;
}

double min_jerk(double tau) {
  tau = std::clamp(tau, 0.0, 1.0);
  return tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau);
}

// ---------------------------------------------------------------------------
// Scripted generator

namespace {

constexpr double kTableHeight = 0.74;
constexpr double kHover = 0.14;
constexpr double kGraspMargin = 0.06;
constexpr double kLift = 0.15;

struct ObjectKind {
  const char* name;
  int primitive;  // 0 box, 1 cylinder, 2 sphere
  Vec3 lo, hi;    // box: size; cylinder: (radius, height, -); sphere: (radius, -, -)
};

const std::vector<ObjectKind>& object_kinds() {
  static const std::vector<ObjectKind> kinds = {
      {"box", 0, {0.10, 0.10, 0.10}, {0.14, 0.14, 0.14}},
      {"book", 0, {0.16, 0.04, 0.22}, {0.16, 0.04, 0.22}},
      {"cup", 1, {0.04, 0.09, 0}, {0.04, 0.09, 0}},
      {"bottle", 1, {0.035, 0.20, 0}, {0.035, 0.20, 0}},
      {"ball", 2, {0.06, 0, 0}, {0.06, 0, 0}},
      {"apple", 2, {0.045, 0, 0}, {0.045, 0, 0}},
  };
  return kinds;
}

struct PlacedObject {
  std::string name;
  Mesh mesh;
  double half_height = 0.0;
  double radius = 0.0;  // bounding radius of the mesh about its centroid
  Mat3 rotation = Mat3::Identity();
  Vec3 center = Vec3::Zero();
};

PlacedObject make_object(const ObjectKind& kind, Rng& rng) {
  PlacedObject o;
  o.name = kind.name;
  Vec3 s;
  for (int i = 0; i < 3; ++i) s[i] = rng.uniform(kind.lo[i], kind.hi[i]);
  if (kind.primitive == 0) {
    if (o.name == "box") s.setConstant(s[0]);
    o.mesh = make_box(s);
    o.half_height = 0.5 * s.y();
  } else if (kind.primitive == 1) {
    o.mesh = make_cylinder(s[0], s[1]);
    o.half_height = 0.5 * s[1];
  } else {
    o.mesh = make_sphere(s[0]);
    o.half_height = s[0];
  }
  o.radius = o.mesh.vertices.rowwise().norm().maxCoeff();
  return o;
}

Mat3 yaw_matrix(double yaw) { return axis_angle_to_matrix(Vec3(0, yaw, 0)); }

/// Shortest rotation taking unit `a` onto unit `b`.
Mat3 min_rotation(const Vec3& a, const Vec3& b) {
  const Vec3 axis = a.cross(b);
  const double s = axis.norm(), c = a.dot(b);
  if (s < 1e-12) {
    if (c > 0) return Mat3::Identity();
    Vec3 perp = a.unitOrthogonal();
    return axis_angle_to_matrix(std::numbers::pi * perp);
  }
  return axis_angle_to_matrix(axis / s * std::atan2(s, c));
}

struct Sway {
  double yaw_a1, yaw_w1, yaw_p1, yaw_a2, yaw_w2, yaw_p2;
  double tx_a, tx_w, tx_p, tz_a, tz_w, tz_p;

  static Sway draw(Rng& rng) {
    Sway s{};
    s.yaw_a1 = rng.uniform(0.03, 0.07);
    s.yaw_w1 = rng.uniform(0.6, 1.2);
    s.yaw_p1 = rng.uniform(0, 2 * std::numbers::pi);
    s.yaw_a2 = rng.uniform(0.01, 0.03);
    s.yaw_w2 = rng.uniform(1.5, 2.5);
    s.yaw_p2 = rng.uniform(0, 2 * std::numbers::pi);
    s.tx_a = rng.uniform(0.005, 0.02);
    s.tx_w = rng.uniform(0.5, 1.0);
    s.tx_p = rng.uniform(0, 2 * std::numbers::pi);
    s.tz_a = rng.uniform(0.005, 0.015);
    s.tz_w = rng.uniform(0.4, 0.9);
    s.tz_p = rng.uniform(0, 2 * std::numbers::pi);
    return s;
  }
  double yaw(double t) const {
    return yaw_a1 * std::sin(yaw_w1 * t + yaw_p1) + yaw_a2 * std::sin(yaw_w2 * t + yaw_p2);
  }
  Vec3 translation(double t) const {
    return Vec3(tx_a * std::sin(tx_w * t + tx_p), 0.0, tz_a * std::sin(tz_w * t + tz_p));
  }
};

BodyParams rest_pose(const Vec& shape) {
  BodyParams p;
  p.shape = shape;
  p.body_pose.row(ToyBodyModel::kLeftShoulder - 1) << 0, 0, -1.30;
  p.body_pose.row(ToyBodyModel::kRightShoulder - 1) << 0, 0, 1.30;
  p.body_pose.row(ToyBodyModel::kLeftElbow - 1) << 0, -0.2, 0;
  p.body_pose.row(ToyBodyModel::kRightElbow - 1) << 0, 0.2, 0;
  return p;
}

void set_lean(BodyParams& p, double alpha) {
  for (int j : {3, 6, 9}) p.body_pose.row(j - 1) << alpha / 3.0, 0, 0;
}

void apply_sway(BodyParams& p, const Sway& sway, double t) {
  p.global_orient = Vec3(0, sway.yaw(t), 0);
  p.translation = sway.translation(t);
}

/// Two-link arm IK toward `target`; writes the shoulder and elbow rotations.
/// Returns the reachable point actually used.
Vec3 solve_arm(const ToyBodyModel& model, BodyParams& p, bool left, const Vec3& target) {
  const int shoulder = left ? ToyBodyModel::kLeftShoulder : ToyBodyModel::kRightShoulder;
  const int elbow = left ? ToyBodyModel::kLeftElbow : ToyBodyModel::kRightElbow;
  const int wrist = left ? ToyBodyModel::kLeftWrist : ToyBodyModel::kRightWrist;
  const int hand = left ? ToyBodyModel::kLeftHand : ToyBodyModel::kRightHand;
  const int collar = left ? ToyBodyModel::kLeftCollar : ToyBodyModel::kRightCollar;
  const BodyState s = model.forward_state(p);
  const Vec3 S = s.joints.row(shoulder).transpose();
  const double l1 = s.bones[elbow].norm();
  const double l2 = s.bones[wrist].norm() + s.bones[hand].norm();
  Vec3 to = target - S;
  const double dist = std::max(to.norm(), 1e-9);
  const Vec3 u = to / dist;
  const double d = std::clamp(dist, std::abs(l1 - l2) + 1e-4, l1 + l2 - 1e-4);
  Vec3 pole(left ? 0.5 : -0.5, -1.0, -0.2);
  pole -= pole.dot(u) * u;
  if (pole.norm() < 1e-6) pole = u.unitOrthogonal();
  pole.normalize();
  const double cos_a = std::clamp((l1 * l1 + d * d - l2 * l2) / (2 * l1 * d), -1.0, 1.0);
  const Vec3 E = S + l1 * (cos_a * u + std::sqrt(1 - cos_a * cos_a) * pole);
  const Vec3 H = S + d * u;
  const Vec3 d1 = (E - S).normalized(), d2 = (H - E).normalized();

  const Vec3 b0 = s.bones[elbow].normalized();
  const Mat3 l_sh = min_rotation(b0, s.global[collar].transpose() * d1);
  const Mat3 g_sh = s.global[collar] * l_sh;
  const Vec3 b1 = s.bones[wrist].normalized();
  const Mat3 l_el = min_rotation(b1, g_sh.transpose() * d2);
  p.body_pose.row(shoulder - 1) = matrix_to_axis_angle(l_sh).transpose();
  p.body_pose.row(elbow - 1) = matrix_to_axis_angle(l_el).transpose();
  p.body_pose.row(wrist - 1).setZero();
  return H;
}

/// Smallest forward lean that brings `target` within reach, then the arm IK.
BodyParams reach(const ToyBodyModel& model, const BodyParams& base, bool left,
                 const Vec3& target) {
  const int shoulder = left ? ToyBodyModel::kLeftShoulder : ToyBodyModel::kRightShoulder;
  BodyParams p = base;
  for (int step = 0; step <= 9; ++step) {
    set_lean(p, 0.1 * step);
    const BodyState s = model.forward_state(p);
    const double l = s.bones[left ? 18 : 19].norm() + s.bones[left ? 20 : 21].norm() +
                     s.bones[left ? 22 : 23].norm();
    if ((target - s.joints.row(shoulder).transpose()).norm() <= 0.95 * l) break;
  }
  solve_arm(model, p, left, target);
  return p;
}

struct HandFrame {
  Mat3 rotation;
  Vec3 position;
};

HandFrame hand_frame(const ToyBodyModel& model, const BodyParams& p, bool left) {
  const BodyState s = model.forward_state(p);
  const int h = left ? ToyBodyModel::kLeftHand : ToyBodyModel::kRightHand;
  return {s.global[h], s.joints.row(h).transpose()};
}

struct Keyframe {
  int frame;
  BodyParams pose;  // without sway
};

std::string direction_phrase(const Vec3& from, const Vec3& to) {
  const Vec3 d = to - from;
  if (std::abs(d.x()) >= std::abs(d.z())) return d.x() > 0 ? "to the left" : "to the right";
  return d.z() > 0 ? "farther away" : "closer to the body";
}

std::string segment_text(Rng& rng, const std::string& object, bool left, const std::string& dir) {
  const std::string hand = left ? "left" : "right";
  switch (rng.index(4)) {
    case 0:
      return "pick up the " + object + " with the " + hand + " hand and place it " + dir;
    case 1:
      return "move the " + object + " " + dir + " using the " + hand + " hand";
    case 2:
      return "lift the " + object + " and put it " + dir;
    default:
      return "grab the " + object + " with the " + hand + " hand and set it down " + dir;
  }
}

std::string join_segment_texts(const std::vector<std::string>& parts) {
  if (parts.size() == 1) return parts[0] + ".";
  std::string out = "First " + parts[0];
  for (std::size_t i = 1; i + 1 < parts.size(); ++i) out += ", then " + parts[i];
  out += ", finally " + parts.back() + ".";
  return out;
}

Rot6d to6(const Mat3& m) { return matrix_to_rot6d(m); }

}  // namespace

GeneratedSequence generate_sequence(const CorpusConfig& config, int index,
                                    const ToyBodyModel& model, const Mat& basis) {
  config.validate();
  const std::uint64_t seq_seed = derive_seed(config.seed, static_cast<std::uint64_t>(index));
  Rng rng(seq_seed);
  const int T = config.min_frames == config.max_frames
                    ? config.min_frames
                    : rng.integer(config.min_frames, config.max_frames);
  const int m = rng.integer(config.min_segments, config.max_segments);
  const double stature = rng.uniform(1.60, 1.85);
  const double mass = rng.uniform(55, 90);
  const Vec shape = shape_from_stature(stature, mass);
  const Sway sway = Sway::draw(rng);

  // Segment boundaries: min_segment_frames each plus a random share of the rest.
  std::vector<double> w(static_cast<std::size_t>(m));
  double wsum = 0;
  for (auto& x : w) wsum += (x = rng.uniform(0.5, 1.5));
  std::vector<int> bounds{0};
  const int spare = T - m * config.min_segment_frames;
  double acc = 0;
  for (int i = 0; i < m; ++i) {
    acc += w[static_cast<std::size_t>(i)];
    const int share = static_cast<int>(std::round(spare * acc / wsum));
    bounds.push_back(i + 1 == m ? T : (i + 1) * config.min_segment_frames + share);
  }

  // Objects on the table in front of the body, spaced along x.
  auto kinds = object_kinds();
  std::vector<int> kind_ids(kinds.size());
  for (std::size_t i = 0; i < kinds.size(); ++i) kind_ids[i] = static_cast<int>(i);
  rng.shuffle(kind_ids);
  std::vector<PlacedObject> objects;
  std::vector<Mat3> initial_rotation;
  std::vector<Vec3> initial_center;
  for (int o = 0; o < config.num_objects; ++o) {
    PlacedObject obj = make_object(kinds[static_cast<std::size_t>(kind_ids[static_cast<std::size_t>(o)])], rng);
    for (int attempt = 0;; ++attempt) {
      obj.center = Vec3(rng.uniform(-0.42, 0.42), kTableHeight + obj.half_height,
                        rng.uniform(0.32, 0.46));
      bool ok = true;
      for (const auto& other : objects)
        ok = ok && std::abs(other.center.x() - obj.center.x()) >= 0.2;
      require(attempt < 1000, ErrorCode::kUnsatisfiable, "corpus: cannot place objects");
      if (ok) break;
    }
    obj.rotation = yaw_matrix(rng.uniform(-std::numbers::pi, std::numbers::pi));
    initial_rotation.push_back(obj.rotation);
    initial_center.push_back(obj.center);
    objects.push_back(obj);
  }

  // Segment -> object: every object once (when segments allow), then random.
  std::vector<int> order(static_cast<std::size_t>(config.num_objects));
  for (int o = 0; o < config.num_objects; ++o) order[static_cast<std::size_t>(o)] = o;
  rng.shuffle(order);
  std::vector<int> seg_object(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i)
    seg_object[static_cast<std::size_t>(i)] =
        i < config.num_objects ? order[static_cast<std::size_t>(i)]
                               : static_cast<int>(rng.index(static_cast<std::size_t>(config.num_objects)));

  const BodyParams rest = rest_pose(shape);
  auto with_sway = [&](BodyParams p, int f) {
    apply_sway(p, sway, f / config.fps);
    return p;
  };
  auto strip_sway = [](BodyParams p) {
    p.global_orient.setZero();
    p.translation.setZero();
    return p;
  };

  std::vector<Keyframe> keys{{0, rest}};
  std::vector<ScriptedAction> actions;
  std::vector<Segment> segments;
  std::vector<std::string> texts;
  struct Weld {
    Mat3 r_rel;
    Vec3 p_rel;
  };
  std::vector<Weld> welds;

  for (int i = 0; i < m; ++i) {
    const int s = bounds[static_cast<std::size_t>(i)], e = bounds[static_cast<std::size_t>(i) + 1];
    const int L = e - s;
    const int o = seg_object[static_cast<std::size_t>(i)];
    PlacedObject& obj = objects[static_cast<std::size_t>(o)];
    const bool left = obj.center.x() >= 0.0;
    ScriptedAction act{o, left, s + static_cast<int>(std::lround(0.30 * L)),
                       s + static_cast<int>(std::lround(0.72 * L))};
    const int apex = s + static_cast<int>(std::lround(0.50 * L));
    const int retreat = s + static_cast<int>(std::lround(0.84 * L));

    // Grasp: stop short of the object along the shoulder->object direction.
    const BodyParams at_grasp = with_sway(rest, act.grasp_frame);
    const int shoulder = left ? ToyBodyModel::kLeftShoulder : ToyBodyModel::kRightShoulder;
    const Vec3 S = model.forward(at_grasp).row(shoulder).transpose();
    const Vec3 u = (obj.center - S).normalized();
    BodyParams grasp = reach(model, at_grasp, left, obj.center - u * (obj.radius + kGraspMargin));
    const HandFrame hg = hand_frame(model, grasp, left);
    Weld weld{hg.rotation.transpose() * obj.rotation, hg.rotation.transpose() * (obj.center - hg.position)};

    // Drop-off point on the table, away from the other objects.
    // First candidate with full clearance; on a crowded table the one with the
    // largest clearance slack.
    Vec3 goal;
    double best_slack = -std::numeric_limits<double>::infinity();
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const Vec3 cand(rng.uniform(-0.45, 0.45), obj.center.y(), rng.uniform(0.32, 0.50));
      double slack = (cand - obj.center).norm() - 0.15;
      for (std::size_t q = 0; q < objects.size(); ++q)
        if (static_cast<int>(q) != o) slack = std::min(slack, (cand - objects[q].center).norm() - 0.22);
      if (slack > best_slack) {
        best_slack = slack;
        goal = cand;
      }
      if (slack >= 0.0) break;
    }
    require(best_slack > -0.1, ErrorCode::kUnsatisfiable, "corpus: cannot find a drop-off point");

    // Release: fixed point on the hand target so the welded object lands on `goal`.
    const BodyParams at_release = with_sway(rest, act.release_frame);
    Vec3 target = goal - (obj.center - hg.position);
    BodyParams release = at_release;
    for (int it = 0; it < 8; ++it) {
      release = reach(model, at_release, left, target);
      const HandFrame hr = hand_frame(model, release, left);
      // Rest the lowest vertex of the (possibly tilted) object on the table.
      const Mat3 r_obj = hr.rotation * weld.r_rel;
      goal.y() = kTableHeight - (obj.mesh.vertices * r_obj.transpose()).col(1).minCoeff();
      target += goal - (hr.position + hr.rotation * weld.p_rel);
    }
    const HandFrame hr = hand_frame(model, release, left);

    const Vec3 mid = 0.5 * (hg.position + hr.position) + Vec3(0, kLift, 0);
    const BodyParams lifted = reach(model, with_sway(rest, apex), left, mid);

    // Hover above the drop-off so the final descent is short.
    const int hover = std::max(apex + 1, act.release_frame - std::max(2, static_cast<int>(std::lround(0.10 * L))));
    const BodyParams above = reach(model, with_sway(rest, hover), left, target + Vec3(0, kHover, 0));

    keys.push_back({act.grasp_frame, strip_sway(grasp)});
    keys.push_back({apex, strip_sway(lifted)});
    if (hover < act.release_frame) keys.push_back({hover, strip_sway(above)});
    keys.push_back({act.release_frame, strip_sway(release)});
    {
      // Back the hand off the released object before returning to rest.
      const BodyParams at_retreat = with_sway(rest, retreat);
      const Vec3 away = (hr.position - (hr.position + hr.rotation * weld.p_rel)).normalized();
      keys.push_back({retreat, strip_sway(reach(model, at_retreat, left,
                                                hr.position + 0.10 * away + Vec3(0, 0.05, 0)))});
    }
    keys.push_back({i + 1 == m ? T - 1 : e, rest});

    const Vec3 start = obj.center;
    obj.rotation = hr.rotation * weld.r_rel;
    obj.center = hr.position + hr.rotation * weld.p_rel;

    const std::string text = segment_text(rng, obj.name, left, direction_phrase(start, obj.center));
    segments.push_back({s, e, text});
    texts.push_back(text);
    actions.push_back(act);
    welds.push_back(weld);
  }

  // Render: min-jerk between keyframes, sway on top.
  HoiSequence seq;
  seq.id = "seq_" + std::string(4 - std::min<std::size_t>(4, std::to_string(index).size()), '0') +
           std::to_string(index);
  seq.text = join_segment_texts(texts);
  seq.segments = segments;
  const int J = model.num_joints();
  seq.human.num_joints = J;
  seq.human.fps = config.fps;
  seq.human.positions.resize(T, 3 * J);
  seq.human.rotations.resize(T, 6 * J);
  seq.human.root.resize(T, 3);

  std::vector<std::vector<Mat3>> obj_r(objects.size(), std::vector<Mat3>(static_cast<std::size_t>(T)));
  std::vector<Mat> obj_t(objects.size(), Mat(T, 3));

  std::size_t key = 0;
  std::vector<BodyParams> frames(static_cast<std::size_t>(T));
  for (int f = 0; f < T; ++f) {
    while (key + 1 < keys.size() && keys[key + 1].frame <= f) ++key;
    BodyParams p;
    if (keys[key].frame == f || key + 1 >= keys.size()) {
      p = keys[key].pose;
    } else {
      const Keyframe& a = keys[key];
      const Keyframe& b = keys[key + 1];
      const double sblend = min_jerk(double(f - a.frame) / double(b.frame - a.frame));
      p = a.pose;
      p.unpack_pose((1.0 - sblend) * a.pose.pack_pose() + sblend * b.pose.pack_pose());
    }
    p.shape = shape;
    frames[static_cast<std::size_t>(f)] = with_sway(p, f);
  }

  for (int f = 0; f < T; ++f) {
    const BodyState st = model.forward_state(frames[static_cast<std::size_t>(f)]);
    for (int j = 0; j < J; ++j) {
      seq.human.positions.block<1, 3>(f, 3 * j) = st.joints.row(j);
      seq.human.rotations.block<1, 6>(f, 6 * j) = to6(st.local[j]).transpose();
    }
    seq.human.root.row(f) = st.joints.row(0);
  }

  // Object poses: welded to the hand between grasp and release, static
  // otherwise.
  {
    std::vector<Vec3> cur_c = initial_center;
    std::vector<Mat3> cur_r = initial_rotation;
    std::size_t next = 0;
    for (int f = 0; f < T; ++f) {
      while (next < actions.size() && actions[next].release_frame < f) ++next;
      for (std::size_t o = 0; o < objects.size(); ++o) {
        obj_r[o][static_cast<std::size_t>(f)] = cur_r[o];
        obj_t[o].row(f) = cur_c[o].transpose();
      }
      if (next < actions.size() && f >= actions[next].grasp_frame) {
        const ScriptedAction& act = actions[next];
        const auto o = static_cast<std::size_t>(act.object);
        const BodyState st = model.forward_state(frames[static_cast<std::size_t>(f)]);
        const int h = act.left_hand ? ToyBodyModel::kLeftHand : ToyBodyModel::kRightHand;
        cur_r[o] = st.global[h] * welds[next].r_rel;
        cur_c[o] = st.joints.row(h).transpose() + st.global[h] * welds[next].p_rel;
        obj_r[o][static_cast<std::size_t>(f)] = cur_r[o];
        obj_t[o].row(f) = cur_c[o].transpose();
      }
    }
  }

  for (std::size_t o = 0; o < objects.size(); ++o) {
    ObjectTrack track;
    const Mat3 r0 = obj_r[o][0];
    const std::uint64_t sample_seed = derive_seed(seq_seed, 100 + o);
    const ObjectGeometry local =
        make_object_geometry(objects[o].name, objects[o].mesh, config.surface_samples, sample_seed, basis);
    track.geometry = rotate_geometry(local, r0, basis);
    track.rotation.resize(T, 6);
    for (int f = 0; f < T; ++f)
      track.rotation.row(f) = to6(obj_r[o][static_cast<std::size_t>(f)] * r0.transpose()).transpose();
    track.rotation.row(0) = identity_rot6d().transpose();
    track.translation = obj_t[o];
    seq.objects.push_back(std::move(track));
  }
  seq.validate();
  return {std::move(seq), std::move(actions), stature, mass};
}

// ---------------------------------------------------------------------------
// Statistics

NormStats compute_norm_stats(const std::vector<const HoiSequence*>& sequences) {
  require(!sequences.empty(), ErrorCode::kInvalidArgument, "norm stats: no sequences");
  const int dh = sequences.front()->human.feature_width();
  Vec hs = Vec::Zero(dh), hq = Vec::Zero(dh);
  Vec os = Vec::Zero(kObjectFeatureWidth), oq = Vec::Zero(kObjectFeatureWidth);
  double hn = 0, on = 0;
  for (const HoiSequence* s : sequences) {
    require(s->human.feature_width() == dh, ErrorCode::kShapeMismatch,
            "norm stats: inconsistent joint counts");
    const Mat h = s->human.flatten();
    hs += h.colwise().sum().transpose();
    hq += h.array().square().matrix().colwise().sum().transpose();
    hn += static_cast<double>(h.rows());
    for (const auto& track : s->objects) {
      const Mat o = track.flatten();
      os += o.colwise().sum().transpose();
      oq += o.array().square().matrix().colwise().sum().transpose();
      on += static_cast<double>(o.rows());
    }
  }
  NormStats st;
  st.human_mean = hs / hn;
  st.human_std = (hq / hn - st.human_mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt().cwiseMax(kStdFloor);
  if (on > 0) {
    st.object_mean = os / on;
    st.object_std = (oq / on - st.object_mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt().cwiseMax(kStdFloor);
  } else {
    st.object_mean = Vec::Zero(kObjectFeatureWidth);
    st.object_std = Vec::Ones(kObjectFeatureWidth);
  }
  return st;
}

void write_norm_stats(const fs::path& path, const NormStats& stats) {
  TensorFile f;
  auto add = [&](const char* name, const Vec& v) {
    f.add(Tensor::from_matrix(name, v.transpose(), {static_cast<std::uint32_t>(v.size())}, DType::kFloat64));
  };
  add("human_mean", stats.human_mean);
  add("human_std", stats.human_std);
  add("object_mean", stats.object_mean);
  add("object_std", stats.object_std);
  f.write(path);
}

NormStats read_norm_stats(const fs::path& path) {
  const TensorFile f = TensorFile::read(path);
  auto get = [&](const char* name) -> Vec {
    const Tensor& t = f.get(name);
    return Eigen::Map<const Vec>(t.real.data(), static_cast<Eigen::Index>(t.real.size()));
  };
  NormStats st;
  st.human_mean = get("human_mean");
  st.human_std = get("human_std");
  st.object_mean = get("object_mean");
  st.object_std = get("object_std");
  require(st.human_mean.size() == st.human_std.size() && st.object_mean.size() == kObjectFeatureWidth &&
              st.object_std.size() == kObjectFeatureWidth,
          ErrorCode::kFormat, "norm stats: inconsistent sizes");
  return st;
}

// ---------------------------------------------------------------------------
// Corpus

namespace {

std::string read_text(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<std::string> split_texts(const std::vector<const HoiSequence*>& seqs) {
  std::vector<std::string> texts;
  for (const auto* s : seqs) {
    texts.push_back(s->text);
    for (const auto& seg : s->segments) texts.push_back(seg.text);
  }
  return texts;
}

}  // namespace

CorpusManifest generate_synthetic_corpus(const CorpusConfig& config, const fs::path& out_dir) {
  config.validate();
  const ToyBodyModel model;
  const Mat& basis = default_bps_basis();
  std::vector<HoiSequence> seqs;
  CorpusManifest manifest;
  manifest.fps = config.fps;
  manifest.num_objects = config.num_objects;
  manifest.num_joints = model.num_joints();
  manifest.seed = config.seed;
  for (const auto& k : object_kinds()) manifest.object_vocabulary.emplace_back(k.name);
  for (int i = 0; i < config.num_sequences; ++i) {
    GeneratedSequence g = generate_sequence(config, i, model, basis);
    quantize_to_float32(g.sequence);
    manifest.ids.push_back(g.sequence.id);
    seqs.push_back(std::move(g.sequence));
  }
  manifest = split_dataset(manifest, config.ratios, config.seed);

  fs::create_directories(out_dir);
  for (const auto& s : seqs) write_archive(out_dir / s.id, s);
  const Corpus corpus = Corpus::from_sequences(std::move(seqs), manifest);
  write_text(out_dir / "manifest.json", manifest.to_json());
  write_text(out_dir / "vocab.json", corpus.vocabulary().to_json());
  write_norm_stats(out_dir / "norm.bin", corpus.stats());
  return manifest;
}

Corpus Corpus::from_sequences(std::vector<HoiSequence> sequences, CorpusManifest manifest) {
  require(sequences.size() == manifest.ids.size(), ErrorCode::kShapeMismatch,
          "corpus: manifest and sequence counts differ");
  if (manifest.splits.size() != manifest.ids.size()) manifest.splits.assign(manifest.ids.size(), "train");
  Corpus c;
  for (auto& s : sequences) {
    const std::string id = s.id;
    require(c.sequences_.emplace(id, std::move(s)).second, ErrorCode::kFormat,
            "corpus: duplicate sequence id " + id);
  }
  c.manifest_ = std::move(manifest);
  for (const auto& id : c.manifest_.ids)
    require(c.sequences_.count(id) > 0, ErrorCode::kFormat, "corpus: missing sequence " + id);
  auto train = c.split("train");
  if (train.empty()) {
    for (const auto& id : c.manifest_.ids) train.push_back(&c.sequences_.at(id));
  }
  c.vocab_ = Vocabulary::build(split_texts(train));
  c.stats_ = compute_norm_stats(train);
  return c;
}

Corpus Corpus::load(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::kIo, "corpus: not a directory: " + dir.string());
  Corpus c;
  c.manifest_ = CorpusManifest::from_json(read_text(dir / "manifest.json"));
  c.vocab_ = Vocabulary::from_json(read_text(dir / "vocab.json"));
  c.stats_ = read_norm_stats(dir / "norm.bin");
  for (const auto& id : c.manifest_.ids) c.sequences_.emplace(id, read_archive(dir / id));
  return c;
}

const HoiSequence& Corpus::sequence(const std::string& id) const {
  auto it = sequences_.find(id);
  require(it != sequences_.end(), ErrorCode::kOutOfRange, "corpus: unknown sequence " + id);
  return it->second;
}

std::vector<const HoiSequence*> Corpus::split(const std::string& name) const {
  std::vector<const HoiSequence*> out;
  for (const auto& id : manifest_.split_ids(name)) out.push_back(&sequences_.at(id));
  return out;
}

Mat pack_objects(const std::vector<ObjectTrack>& objects, const std::vector<int>& order) {
  require(!order.empty() && order.size() == objects.size(), ErrorCode::kShapeMismatch,
          "pack_objects: order must be a permutation of the objects");
  const int T = objects.front().frames();
  Mat out(T, static_cast<Eigen::Index>(order.size()) * kObjectFeatureWidth);
  for (std::size_t slot = 0; slot < order.size(); ++slot) {
    const int o = order[slot];
    require(o >= 0 && o < static_cast<int>(objects.size()), ErrorCode::kOutOfRange,
            "pack_objects: bad object index");
    require(objects[static_cast<std::size_t>(o)].frames() == T, ErrorCode::kShapeMismatch,
            "pack_objects: tracks differ in length");
    out.middleCols(static_cast<Eigen::Index>(slot) * kObjectFeatureWidth, kObjectFeatureWidth) =
        objects[static_cast<std::size_t>(o)].flatten();
  }
  return out;
}

Sample Corpus::make_sample(const HoiSequence& seq, const LoadOptions& options, Rng& rng,
                           int segment) const {
  require(options.mode == "full" || options.mode == "segment", ErrorCode::kConfig,
          "load: mode must be 'full' or 'segment'");
  require(options.max_frames >= 2 && options.max_text >= 1 && options.k_max >= 1,
          ErrorCode::kConfig, "load: bad limits");
  Sample out;
  out.id = seq.id;
  int start = 0, count = 0;
  if (options.mode == "full") {
    out.text = seq.text;
    out.k = 1;
    count = std::min(seq.frames(), options.max_frames);
  } else {
    const int n = static_cast<int>(seq.segments.size());
    if (segment < 0) segment = static_cast<int>(rng.index(static_cast<std::size_t>(n)));
    require(segment < n, ErrorCode::kOutOfRange, "load: segment index out of range");
    const Segment& sg = seq.segments[static_cast<std::size_t>(segment)];
    const int k = options.fixed_k > 0 ? options.fixed_k : rng.integer(1, options.k_max);
    start = std::max(0, sg.start - k);
    out.k = std::max(1, sg.start - start);
    count = std::min(sg.end, start + options.max_frames) - start;
    out.text = sg.text;
  }
  require(count > out.k, ErrorCode::kOutOfRange, "load: clip shorter than its condition");
  out.tokens = vocab_.encode(out.text, options.max_text);
  out.length = count;

  std::vector<ObjectTrack> tracks;
  for (const auto& t : seq.objects) {
    ObjectTrack c = t.slice(start, count);
    tracks.push_back(start > 0 ? rebase_track(c, 0, default_bps_basis()) : std::move(c));
  }
  out.object_order.resize(tracks.size());
  for (std::size_t i = 0; i < tracks.size(); ++i) out.object_order[i] = static_cast<int>(i);
  if (options.shuffle_objects) rng.shuffle(out.object_order);
  for (int o : out.object_order) out.geometry.push_back(tracks[static_cast<std::size_t>(o)].geometry);

  out.human_raw = seq.human.slice(start, count).flatten();
  out.objects_raw = pack_objects(tracks, out.object_order);
  out.human = stats_.normalize_human(out.human_raw);
  out.objects = stats_.normalize_objects(out.objects_raw);
  out.mask = Vec::Ones(count);
  return out;
}

Batch Corpus::load_batch(const std::string& split_name, int batch_size, std::uint64_t seed,
                         const LoadOptions& options) const {
  require(batch_size >= 1, ErrorCode::kConfig, "load: batch_size must be >= 1");
  const auto seqs = split(split_name);
  require(!seqs.empty(), ErrorCode::kOutOfRange, "load: split '" + split_name + "' is empty");
  Rng rng(seed);
  std::vector<int> perm(seqs.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  rng.shuffle(perm);
  Batch b;
  for (int i = 0; i < batch_size; ++i) {
    const HoiSequence& s = *seqs[static_cast<std::size_t>(perm[static_cast<std::size_t>(i) % perm.size()])];
    b.samples.push_back(make_sample(s, options, rng));
    b.max_len = std::max(b.max_len, b.samples.back().length);
  }
  // Zero-pad to the longest clip.
  for (auto& s : b.samples) {
    const Eigen::Index pad = b.max_len - s.length;
    if (pad == 0) continue;
    Mat h = Mat::Zero(b.max_len, s.human.cols());
    h.topRows(s.length) = s.human;
    Mat o = Mat::Zero(b.max_len, s.objects.cols());
    o.topRows(s.length) = s.objects;
    Vec mk = Vec::Zero(b.max_len);
    mk.head(s.length).setOnes();
    s.human = std::move(h);
    s.objects = std::move(o);
    s.mask = std::move(mk);
  }
  return b;
}

}  // namespace himo
