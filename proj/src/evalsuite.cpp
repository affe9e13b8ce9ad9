#include "himo/evalsuite.hpp"

#include <cmath>
#include <fstream>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "himo/archive.hpp"

namespace himo {

namespace fs = std::filesystem;
using json = nlohmann::json;
using nn::Linear;
using nn::Tape;
using nn::Var;

void ExtractorConfig::validate() const {
  require(feature_width >= 1 && hidden >= 1 && embed >= 1, ErrorCode::kConfig,
          "extractor: widths must be positive");
  require(temperature > 0, ErrorCode::kConfig, "extractor: temperature must be positive");
  require(steps >= 0 && batch_size >= 2 && lr > 0, ErrorCode::kConfig,
          "extractor: need steps >= 0, batch_size >= 2, lr > 0");
  require(max_text >= 1 && max_frames >= 2, ErrorCode::kConfig, "extractor: bad length limits");
  require(segment_fraction >= 0 && segment_fraction <= 1, ErrorCode::kConfig,
          "extractor: segment_fraction must lie in [0, 1]");
}

FeatureExtractors::FeatureExtractors(ExtractorConfig config, int vocab_size, int motion_width,
                                     NormStats stats, std::uint64_t seed)
    : config_(config), vocab_size_(vocab_size), motion_width_(motion_width), stats_(std::move(stats)) {
  config_.validate();
  require(vocab_size >= 2 && motion_width >= 1, ErrorCode::kConfig,
          "extractor: bad vocabulary size or motion width");
  Rng rng(seed);
  const int h = config_.hidden, d = config_.feature_width, e = config_.embed;
  m1_ = Linear::create(store_, "motion.fc1", motion_width, h, rng);
  m2_ = Linear::create(store_, "motion.fc2", h, h, rng);
  m_out_ = Linear::create(store_, "motion.out", 2 * h, d, rng);
  table_ = &store_.add("text.embedding", nn::normal_init(vocab_size, e, 0.1, rng));
  t1_ = Linear::create(store_, "text.fc1", e, h, rng);
  t_out_ = Linear::create(store_, "text.out", 2 * h, d, rng);
}

Var FeatureExtractors::motion(Tape& tape, const Mat& human, const Mat& objects) const {
  require(human.rows() == objects.rows() && human.rows() >= 1, ErrorCode::kShapeMismatch,
          "extractor: human and object streams differ in length");
  require(human.cols() + objects.cols() == motion_width_, ErrorCode::kShapeMismatch,
          "extractor: motion width mismatch");
  Mat x(human.rows(), motion_width_);
  x << stats_.normalize_human(human), stats_.normalize_objects(objects);
  const Var hidden = m2_(tape, ad::gelu(m1_(tape, tape.constant(std::move(x)))));
  const Var pooled = ad::concat_cols({ad::mean_rows(hidden), ad::max_rows(hidden)});
  return ad::normalize_rows(m_out_(tape, pooled));
}

Var FeatureExtractors::text(Tape& tape, const std::vector<int>& tokens) const {
  std::vector<int> ids;
  for (int id : tokens) {
    require(id >= 0 && id < vocab_size_, ErrorCode::kOutOfRange,
            "extractor: token id outside the vocabulary");
    if (id != kPadToken) ids.push_back(id);
  }
  if (ids.empty()) ids.push_back(kPadToken);
  const Var hidden = ad::gelu(t1_(tape, ad::gather_rows(tape.param(*table_), ids)));
  const Var pooled = ad::concat_cols({ad::mean_rows(hidden), ad::max_rows(hidden)});
  return ad::normalize_rows(t_out_(tape, pooled));
}

Mat FeatureExtractors::motion_feature(const Mat& human, const Mat& objects) const {
  Tape tape;
  tape.set_grad_enabled(false);
  return motion(tape, human, objects).value();
}

Mat FeatureExtractors::text_feature(const std::vector<int>& tokens) const {
  Tape tape;
  tape.set_grad_enabled(false);
  return text(tape, tokens).value();
}

namespace {

json config_json(const ExtractorConfig& c) {
  return {{"feature_width", c.feature_width}, {"hidden", c.hidden},
          {"embed", c.embed},                 {"temperature", c.temperature},
          {"steps", c.steps},                 {"batch_size", c.batch_size},
          {"lr", c.lr},                       {"max_text", c.max_text},
          {"max_frames", c.max_frames},       {"segment_fraction", c.segment_fraction}};
}

ExtractorConfig config_from_json(const json& j) {
  ExtractorConfig c;
  c.feature_width = j.at("feature_width").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.embed = j.at("embed").get<int>();
  c.temperature = j.at("temperature").get<double>();
  c.steps = j.at("steps").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr = j.at("lr").get<double>();
  c.max_text = j.at("max_text").get<int>();
  c.max_frames = j.at("max_frames").get<int>();
  c.segment_fraction = j.at("segment_fraction").get<double>();
  return c;
}

void add_vec(TensorFile& f, const std::string& name, const Vec& v) {
  f.add(Tensor::from_matrix(name, v.transpose(), {static_cast<std::uint32_t>(v.size())},
                            DType::kFloat64));
}

Vec get_vec(const TensorFile& f, const std::string& name) {
  const Tensor& t = f.get(name);
  return Eigen::Map<const Vec>(t.real.data(), static_cast<Eigen::Index>(t.real.size()));
}

}  // namespace

void FeatureExtractors::save(const fs::path& dir) const {
  fs::create_directories(dir);
  const json meta{{"schema_version", kExtractorSchemaVersion},
                  {"kind", "extractors"},
                  {"config", config_json(config_)},
                  {"vocab_size", vocab_size_},
                  {"motion_width", motion_width_}};
  const std::string text = meta.dump(1);
  write_file_bytes(dir / "meta.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  TensorFile f;
  store_.export_to(f, false);
  add_vec(f, "stats/human_mean", stats_.human_mean);
  add_vec(f, "stats/human_std", stats_.human_std);
  add_vec(f, "stats/object_mean", stats_.object_mean);
  add_vec(f, "stats/object_std", stats_.object_std);
  f.write(dir / "tensors.bin");
}

FeatureExtractors FeatureExtractors::load(const fs::path& dir) {
  const auto bytes = read_file_bytes(dir / "meta.json");
  json meta;
  try {
    meta = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("extractors: ") + e.what());
  }
  require(meta.value("kind", "") == "extractors", ErrorCode::kFormat,
          "extractors: " + dir.string() + " is not an extractor checkpoint");
  require(meta.value("schema_version", -1) == kExtractorSchemaVersion, ErrorCode::kVersionMismatch,
          "extractors: unsupported schema_version");
  const TensorFile f = TensorFile::read(dir / "tensors.bin");
  NormStats st;
  st.human_mean = get_vec(f, "stats/human_mean");
  st.human_std = get_vec(f, "stats/human_std");
  st.object_mean = get_vec(f, "stats/object_mean");
  st.object_std = get_vec(f, "stats/object_std");
  FeatureExtractors ex(config_from_json(meta.at("config")), meta.at("vocab_size").get<int>(),
                       meta.at("motion_width").get<int>(), std::move(st), 0);
  ex.store_.import_from(f, false);
  return ex;
}

double contrastive_loss(const Mat& motion, const Mat& text, double temperature, Mat* grad_motion,
                        Mat* grad_text) {
  require(motion.rows() == text.rows() && motion.cols() == text.cols() && motion.rows() >= 1,
          ErrorCode::kShapeMismatch, "contrastive_loss: mismatched batches");
  const Eigen::Index B = motion.rows();
  const Mat s = motion * text.transpose() / temperature;
  auto softmax_rows = [](const Mat& x) {
    Mat p = x.colwise() - x.rowwise().maxCoeff();
    p = p.array().exp();
    return Mat(p.array().colwise() / p.rowwise().sum().array());
  };
  const Mat pr = softmax_rows(s);
  const Mat pc = softmax_rows(s.transpose());  // column-wise softmax, transposed
  double loss = 0.0;
  for (Eigen::Index i = 0; i < B; ++i) loss -= std::log(pr(i, i)) + std::log(pc(i, i));
  loss /= 2.0 * static_cast<double>(B);
  if (grad_motion || grad_text) {
    const Mat eye = Mat::Identity(B, B);
    const Mat ds = ((pr - eye) + (pc - eye).transpose()) / (2.0 * static_cast<double>(B));
    if (grad_motion) *grad_motion = ds * text / temperature;
    if (grad_text) *grad_text = ds.transpose() * motion / temperature;
  }
  return loss;
}

FeatureExtractors train_extractors(const Corpus& corpus, const ExtractorConfig& config,
                                   std::uint64_t seed, ExtractorTrainLog* log) {
  config.validate();
  const auto train = corpus.split("train");
  require(!train.empty(), ErrorCode::kOutOfRange, "extractors: train split is empty");
  const int motion_width = train.front()->human.feature_width() +
                           static_cast<int>(train.front()->objects.size()) * kObjectFeatureWidth;
  FeatureExtractors ex(config, corpus.vocabulary().size(), motion_width, corpus.stats(),
                       derive_seed(seed, 1));
  nn::AdamConfig ac;
  ac.learning_rate = config.lr;
  ac.grad_clip = 1.0;
  nn::Adam adam(ac);
  LoadOptions full = LoadOptions::full();
  full.max_frames = config.max_frames;
  full.max_text = config.max_text;
  full.shuffle_objects = false;
  LoadOptions seg = LoadOptions::segment();
  seg.max_text = config.max_text;
  seg.shuffle_objects = false;

  const int B = std::min<int>(config.batch_size, std::max<int>(2, static_cast<int>(train.size())));
  for (int step = 0; step < config.steps; ++step) {
    Rng rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(step)));
    std::vector<int> perm(train.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
    rng.shuffle(perm);
    Tape tape;
    std::vector<Var> ms, ts;
    for (int b = 0; b < B; ++b) {
      const HoiSequence& s = *train[static_cast<std::size_t>(perm[static_cast<std::size_t>(b) % perm.size()])];
      const bool use_segment = rng.uniform() < config.segment_fraction;
      const Sample smp = corpus.make_sample(s, use_segment ? seg : full, rng);
      ms.push_back(ex.motion(tape, smp.human_raw, smp.objects_raw));
      ts.push_back(ex.text(tape, smp.tokens.ids));
    }
    const Var m = ad::concat_rows(ms), t = ad::concat_rows(ts);
    Mat gm, gt;
    const double loss = contrastive_loss(m.value(), t.value(), config.temperature, &gm, &gt);
    require(std::isfinite(loss), ErrorCode::kNumerical,
            "extractors: loss is not finite at step " + std::to_string(step));
    ex.params().zero_grad();
    tape.accumulate(m.id, gm);
    tape.accumulate(t.id, gt);
    tape.backward();
    adam.step(ex.params(), config.lr);
    if (log) log->loss.push_back(loss);
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Metrics

MetricStat summarize(const std::vector<double>& values) {
  MetricStat s;
  s.values = values;
  s.repetitions = static_cast<int>(values.size());
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double var = 0.0;
    for (double v : values) var += (v - s.mean) * (v - s.mean);
    var /= static_cast<double>(values.size() - 1);
    s.ci95 = 1.96 * std::sqrt(var) / std::sqrt(static_cast<double>(values.size()));
  }
  return s;
}

std::string MetricReport::to_json() const {
  json cfg = json::object();
  for (const auto& [k, v] : config) cfg[k] = v;
  json j = json::object();
  for (const auto& [name, stat] : metrics) {
    j[name] = {{"mean", stat.mean},
               {"ci95", stat.ci95},
               {"repetitions", stat.repetitions},
               {"values", stat.values},
               {"config", cfg}};
  }
  return j.dump(1);
}

std::vector<double> r_precision(const Mat& motion, const Mat& text, int pool_size, int top_k,
                                int repetitions, std::uint64_t seed) {
  require(motion.rows() == text.rows() && motion.cols() == text.cols(), ErrorCode::kShapeMismatch,
          "r_precision: motion and text features differ in shape");
  const int n = static_cast<int>(motion.rows());
  require(pool_size >= 2 && pool_size <= n, ErrorCode::kInvalidArgument,
          "r_precision: pool size " + std::to_string(pool_size) + " exceeds the " +
              std::to_string(n) + " available pairs");
  require(top_k >= 1 && top_k <= pool_size && repetitions >= 1, ErrorCode::kInvalidArgument,
          "r_precision: need 1 <= top_k <= pool_size and repetitions >= 1");
  std::vector<double> out;
  std::vector<int> others(static_cast<std::size_t>(n - 1));
  for (int r = 0; r < repetitions; ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    int hits = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0, c = 0; j < n; ++j)
        if (j != i) others[static_cast<std::size_t>(c++)] = j;
      // Partial Fisher-Yates for pool_size - 1 distractors.
      for (int d = 0; d < pool_size - 1; ++d) {
        const auto pick = static_cast<std::size_t>(d) + rng.index(others.size() - static_cast<std::size_t>(d));
        std::swap(others[static_cast<std::size_t>(d)], others[pick]);
      }
      const double true_dist = (motion.row(i) - text.row(i)).norm();
      int better = 0;
      for (int d = 0; d < pool_size - 1; ++d)
        if ((motion.row(i) - text.row(others[static_cast<std::size_t>(d)])).norm() < true_dist) ++better;
      if (better < top_k) ++hits;
    }
    out.push_back(static_cast<double>(hits) / n);
  }
  return out;
}

Mat feature_mean(const Mat& features) { return features.colwise().mean(); }

Mat feature_covariance(const Mat& features, double jitter) {
  require(features.rows() >= 2, ErrorCode::kInvalidArgument,
          "covariance: needs at least two samples");
  const Mat c = features.rowwise() - features.colwise().mean();
  Mat cov = c.transpose() * c / static_cast<double>(features.rows() - 1);
  cov.diagonal().array() += jitter;
  return cov;
}

namespace {

Mat sym_sqrt(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
  const Vec ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const Vec& mu_a, const Mat& cov_a, const Vec& mu_b, const Mat& cov_b) {
  require(mu_a.size() == mu_b.size() && cov_a.rows() == mu_a.size() && cov_b.rows() == mu_b.size(),
          ErrorCode::kShapeMismatch, "fid: moment shapes differ");
  const Mat sa = sym_sqrt(cov_a);
  const Mat inner = sa * cov_b * sa;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
}

double fid(const Mat& a, const Mat& b) {
  require(a.rows() >= 2 && b.rows() >= 2, ErrorCode::kInvalidArgument,
          "fid: each set needs at least two samples");
  require(a.cols() == b.cols(), ErrorCode::kShapeMismatch, "fid: feature widths differ");
  return frechet_distance(feature_mean(a).transpose(), feature_covariance(a),
                          feature_mean(b).transpose(), feature_covariance(b));
}

double mm_dist(const Mat& motion, const Mat& text) {
  require(motion.rows() == text.rows() && motion.cols() == text.cols() && motion.rows() >= 1,
          ErrorCode::kShapeMismatch, "mm_dist: motion and text features differ in shape");
  return (motion - text).rowwise().norm().mean();
}

double diversity(const Mat& features, int subset_size, std::uint64_t seed) {
  const int n = static_cast<int>(features.rows());
  require(n >= 2 && subset_size >= 1, ErrorCode::kInvalidArgument,
          "diversity: needs at least two samples and a positive subset size");
  const int s = std::min(subset_size, n / 2);
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(perm);
  double total = 0.0;
  for (int i = 0; i < s; ++i)
    total += (features.row(perm[static_cast<std::size_t>(i)]) -
              features.row(perm[static_cast<std::size_t>(s + i)])).norm();
  return total / s;
}

double multimodality(const std::vector<Mat>& per_text) {
  require(!per_text.empty(), ErrorCode::kInvalidArgument, "multimodality: no texts");
  double total = 0.0;
  for (const Mat& f : per_text) {
    require(f.rows() >= 2, ErrorCode::kInvalidArgument,
            "multimodality: needs at least two samples per text");
    double sum = 0.0;
    int pairs = 0;
    for (Eigen::Index i = 0; i < f.rows(); ++i)
      for (Eigen::Index j = i + 1; j < f.rows(); ++j, ++pairs) sum += (f.row(i) - f.row(j)).norm();
    total += sum / pairs;
  }
  return total / static_cast<double>(per_text.size());
}

std::vector<EvalItem> eval_items(const Corpus& corpus, const std::string& split, int max_text,
                                 int max_frames) {
  const auto seqs = corpus.split(split);
  require(!seqs.empty(), ErrorCode::kOutOfRange, "eval: split '" + split + "' is empty");
  LoadOptions opts = LoadOptions::full();
  opts.max_text = max_text;
  opts.max_frames = max_frames;
  opts.shuffle_objects = false;
  std::vector<EvalItem> items;
  Rng unused(0);
  for (const HoiSequence* s : seqs) {
    const Sample smp = corpus.make_sample(*s, opts, unused);
    EvalItem it;
    it.text = smp.text;
    it.tokens = smp.tokens.ids;
    it.frames = smp.length;
    it.human = smp.human_raw;
    it.objects = smp.objects_raw;
    it.condition.text = smp.text;
    it.condition.text_tokens = smp.tokens.ids;
    it.condition.k = 1;
    it.condition.human_init = smp.human_raw.topRows(1);
    it.condition.object_init = smp.objects_raw.topRows(1);
    it.condition.geometry = smp.geometry;
    items.push_back(std::move(it));
  }
  return items;
}

MetricReport evaluate(const FeatureExtractors& ex, const std::vector<EvalItem>& items,
                      const Generator& generator, const EvalOptions& o) {
  require(!items.empty(), ErrorCode::kInvalidArgument, "eval: no evaluation items");
  require(o.repetitions >= 1, ErrorCode::kInvalidArgument, "eval: repetitions must be >= 1");
  const auto n = static_cast<Eigen::Index>(items.size());
  const int d = ex.config().feature_width;
  Mat gt(n, d), text(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& it = items[static_cast<std::size_t>(i)];
    gt.row(i) = ex.motion_feature(it.human, it.objects);
    text.row(i) = ex.text_feature(it.tokens);
  }
  auto generate = [&](const EvalItem& it, std::uint64_t seed) -> Mat {
    if (!generator) return ex.motion_feature(it.human, it.objects);
    const SampleResult r = generator(it, seed);
    return ex.motion_feature(r.human, r.objects);
  };

  const std::string rp = "r_precision_top" + std::to_string(o.top_k);
  std::map<std::string, std::vector<double>> values;
  const int mm_texts = std::min<int>(o.mm_texts, static_cast<int>(n));
  for (int r = 0; r < o.repetitions; ++r) {
    const std::uint64_t rs = derive_seed(o.seed, static_cast<std::uint64_t>(r));
    Mat gen(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
      gen.row(i) = generate(items[static_cast<std::size_t>(i)], derive_seed(rs, static_cast<std::uint64_t>(i)));
    values[rp].push_back(r_precision(gen, text, o.pool_size, o.top_k, 1, derive_seed(rs, 1u << 20))[0]);
    values["real_" + rp].push_back(
        r_precision(gt, text, o.pool_size, o.top_k, 1, derive_seed(rs, 1u << 20))[0]);
    values["fid"].push_back(fid(gen, gt));
    values["mm_dist"].push_back(mm_dist(gen, text));
    values["real_mm_dist"].push_back(mm_dist(gt, text));
    values["diversity"].push_back(diversity(gen, o.diversity_subset, derive_seed(rs, 1u << 21)));
    values["real_diversity"].push_back(diversity(gt, o.diversity_subset, derive_seed(rs, 1u << 21)));
    if (o.mm_samples >= 2 && mm_texts >= 1) {
      std::vector<Mat> per_text;
      for (int i = 0; i < mm_texts; ++i) {
        Mat f(o.mm_samples, d);
        for (int s = 0; s < o.mm_samples; ++s)
          f.row(s) = generate(items[static_cast<std::size_t>(i)],
                              derive_seed(rs, (2ull << 20) + static_cast<std::uint64_t>(i * o.mm_samples + s)));
        per_text.push_back(std::move(f));
      }
      values["multimodality"].push_back(multimodality(per_text));
    }
  }

  MetricReport report;
  for (auto& [k, v] : values) report.metrics[k] = summarize(v);
  report.config = {{"repetitions", std::to_string(o.repetitions)},
                   {"pool_size", std::to_string(o.pool_size)},
                   {"top_k", std::to_string(o.top_k)},
                   {"diversity_subset", std::to_string(o.diversity_subset)},
                   {"mm_samples", std::to_string(o.mm_samples)},
                   {"mm_texts", std::to_string(mm_texts)},
                   {"guidance_scale", std::to_string(o.guidance_scale)},
                   {"seed", std::to_string(o.seed)},
                   {"feature_width", std::to_string(d)},
                   {"temperature", std::to_string(ex.config().temperature)},
                   {"items", std::to_string(n)},
                   {"generated", generator ? "model" : "ground_truth"}};
  return report;
}

}  // namespace himo
