#include "himo/trainer.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "himo/archive.hpp"
#include "himo/losses.hpp"

namespace himo {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::vector<ObjectPoses> unpack_poses(const Mat& packed) {
  std::vector<ObjectPoses> out;
  for (Eigen::Index o = 0; o < packed.cols() / kObjectFeatureWidth; ++o) {
    const Mat block = packed.middleCols(o * kObjectFeatureWidth, kObjectFeatureWidth);
    out.push_back({block.leftCols(6), block.rightCols(3)});
  }
  return out;
}

Mat pack_poses(const std::vector<ObjectPoses>& poses, Eigen::Index rows) {
  Mat out = Mat::Zero(rows, static_cast<Eigen::Index>(poses.size()) * kObjectFeatureWidth);
  for (std::size_t o = 0; o < poses.size(); ++o) {
    const Eigen::Index c = static_cast<Eigen::Index>(o) * kObjectFeatureWidth;
    if (poses[o].rotation.size()) out.middleCols(c, 6) = poses[o].rotation;
    if (poses[o].translation.size()) out.middleCols(c + 6, 3) = poses[o].translation;
  }
  return out;
}

Mat frame_joints(const Mat& positions, Eigen::Index t, int joints) {
  Mat j(joints, 3);
  for (int k = 0; k < joints; ++k) j.row(k) = positions.block<1, 3>(t, 3 * k);
  return j;
}

}  // namespace

StepLosses sample_losses(const Mat& pred_human, const Mat& pred_objects, const Sample& sample,
                         const NormStats& stats, const BodyModel& body, const RunConfig& config,
                         Mat* grad_human, Mat* grad_objects) {
  const Eigen::Index L = sample.length;
  require(pred_human.rows() == L && pred_objects.rows() == L, ErrorCode::kShapeMismatch,
          "losses: prediction length differs from the sample");
  const int J = body.num_joints();
  const Mat gt_h = sample.human.topRows(L), gt_o = sample.objects.topRows(L);
  require(pred_human.cols() == gt_h.cols() && pred_objects.cols() == gt_o.cols(),
          ErrorCode::kShapeMismatch, "losses: prediction width differs from the sample");

  StepLosses out;
  const double n = static_cast<double>(L * (gt_h.cols() + gt_o.cols()));
  const Mat dh = pred_human - gt_h, dob = pred_objects - gt_o;
  out.rec = (dh.squaredNorm() + dob.squaredNorm()) / n;

  // Geometric losses act on raw-unit predictions.
  const Mat raw_h = stats.denormalize_human(pred_human);
  const Mat raw_o = stats.denormalize_objects(pred_objects);
  const Mat gt_pos = sample.human_raw.leftCols(3 * J);
  Mat g_pos, g_vel;
  const bool want = grad_human || grad_objects;
  out.parts.pos = loss_pos(raw_h.leftCols(3 * J), gt_pos, {}, want ? &g_pos : nullptr);
  out.parts.vel = loss_vel(raw_h.leftCols(3 * J), gt_pos, {}, want ? &g_vel : nullptr);

  const auto pred_poses = unpack_poses(raw_o);
  const auto gt_poses = unpack_poses(sample.objects_raw);
  std::vector<Mat> samples;
  const auto limit = static_cast<Eigen::Index>(config.integer("loss_samples"));
  for (const auto& g : sample.geometry)
    samples.push_back(g.surface_samples.topRows(std::min(limit, g.surface_samples.rows())));
  const LossWeights w = config.loss_weights();
  std::vector<ObjectPoses> g_pen, g_dis;
  if (w.pen > 0.0) {
    std::vector<SdfGrid> grids;
    grids.reserve(static_cast<std::size_t>(L));
    for (Eigen::Index t = 0; t < L; ++t) {
      grids.push_back(body_sdf_grid(frame_joints(gt_pos, t, J), body.parents(), body.capsule_radii(),
                                    kSdfResolution, kSdfPadding, false));
      grids.back().frame = static_cast<int>(t);
    }
    out.parts.pen = loss_pen(pred_poses, samples, grids, {}, want ? &g_pen : nullptr);
  }
  if (w.dis > 0.0 && pred_poses.size() >= 2)
    out.parts.dis = loss_dis(pred_poses, gt_poses, samples, {}, want ? &g_dis : nullptr);

  const double w_rec = config.real("w_rec");
  out.total = w_rec * out.rec + total_loss(out.parts, w);

  if (grad_human) {
    Mat g_raw = Mat::Zero(L, pred_human.cols());
    g_raw.leftCols(3 * J) = w.pos * g_pos + w.vel * g_vel;
    *grad_human = (2.0 * w_rec / n) * dh + g_raw * stats.human_std.asDiagonal();
  }
  if (grad_objects) {
    Mat g_raw = Mat::Zero(L, pred_objects.cols());
    if (!g_pen.empty()) g_raw += w.pen * pack_poses(g_pen, L);
    if (!g_dis.empty()) g_raw += w.dis * pack_poses(g_dis, L);
    const Vec std_o = stats.object_std_packed(static_cast<int>(pred_poses.size()));
    *grad_objects = (2.0 * w_rec / n) * dob + g_raw * std_o.asDiagonal();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const fs::path& dir, const Denoiser& model, const RunConfig& config,
                     const Vocabulary& vocab, long long step, long long adam_steps,
                     double best_val) {
  fs::create_directories(dir);
  const DenoiserConfig& dc = model.config();
  const json meta{{"schema_version", kCheckpointSchemaVersion},
                  {"kind", "denoiser"},
                  {"step", step},
                  {"adam_steps", adam_steps},
                  {"best_val", best_val},
                  {"vocab_size", dc.vocab_size},
                  {"num_objects", dc.num_objects},
                  {"num_joints", dc.num_joints},
                  {"geometry_points", dc.geometry_points},
                  {"run_config", json::parse(config.to_json())}};
  const std::string meta_text = meta.dump(1);
  write_file_bytes(dir / "meta.json", std::vector<std::uint8_t>(meta_text.begin(), meta_text.end()));
  const std::string vocab_text = vocab.to_json();
  write_file_bytes(dir / "vocab.json", std::vector<std::uint8_t>(vocab_text.begin(), vocab_text.end()));
  TensorFile f;
  model.params().export_to(f, true);
  const NormStats& st = model.stats();
  auto add = [&](const char* name, const Vec& v) {
    f.add(Tensor::from_matrix(name, v.transpose(), {static_cast<std::uint32_t>(v.size())},
                              DType::kFloat64));
  };
  add("stats/human_mean", st.human_mean);
  add("stats/human_std", st.human_std);
  add("stats/object_mean", st.object_mean);
  add("stats/object_std", st.object_std);
  f.write(dir / "tensors.bin");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  require(fs::exists(dir / "meta.json"), ErrorCode::kIo, "checkpoint: no meta.json in " + dir.string());
  const auto bytes = read_file_bytes(dir / "meta.json");
  json meta;
  try {
    meta = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("checkpoint: ") + e.what());
  }
  require(meta.value("kind", "") == "denoiser", ErrorCode::kFormat,
          "checkpoint: " + dir.string() + " is not a denoiser checkpoint");
  require(meta.value("schema_version", -1) == kCheckpointSchemaVersion, ErrorCode::kVersionMismatch,
          "checkpoint: unsupported schema_version");
  Checkpoint ck;
  try {
    ck.config = RunConfig::from_json(meta.at("run_config").dump());
    ck.step = meta.at("step").get<long long>();
    ck.adam_steps = meta.at("adam_steps").get<long long>();
    ck.best_val = meta.at("best_val").is_number() ? meta.at("best_val").get<double>()
                                                  : std::numeric_limits<double>::quiet_NaN();
    const auto vb = read_file_bytes(dir / "vocab.json");
    ck.vocab = Vocabulary::from_json(std::string(vb.begin(), vb.end()));
    DenoiserConfig dc = ck.config.denoiser(meta.at("vocab_size").get<int>(),
                                           meta.at("num_objects").get<int>(),
                                           meta.at("num_joints").get<int>());
    dc.geometry_points = meta.at("geometry_points").get<int>();
    require(dc.vocab_size == ck.vocab.size(), ErrorCode::kConfig,
            "checkpoint: vocabulary size does not match the stored model");
    ck.model = std::make_unique<Denoiser>(dc);
  } catch (const json::exception& e) {
    fail(ErrorCode::kFormat, std::string("checkpoint: ") + e.what());
  }
  const TensorFile f = TensorFile::read(dir / "tensors.bin");
  ck.model->params().import_from(f, true);
  auto get = [&](const char* name) -> Vec {
    const Tensor& t = f.get(name);
    return Eigen::Map<const Vec>(t.real.data(), static_cast<Eigen::Index>(t.real.size()));
  };
  NormStats st;
  st.human_mean = get("stats/human_mean");
  st.human_std = get("stats/human_std");
  st.object_mean = get("stats/object_mean");
  st.object_std = get("stats/object_std");
  ck.model->set_stats(std::move(st));
  return ck;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const Corpus& corpus, RunConfig config)
    : corpus_(corpus), config_(std::move(config)), adam_(config_.adam()) {
  config_.validate();
  const auto train = corpus_.split("train");
  require(!train.empty(), ErrorCode::kOutOfRange, "train: the train split is empty");
  const auto seed = static_cast<std::uint64_t>(config_.integer("seed"));
  DenoiserConfig dc = config_.denoiser(corpus_.vocabulary().size(), corpus_.manifest().num_objects,
                                       corpus_.manifest().num_joints);
  // The code width follows the corpus surface sampling.
  const auto& objects = train.front()->objects;
  require(!objects.empty(), ErrorCode::kShapeMismatch, "train: sequence has no objects");
  dc.geometry_points = static_cast<int>(objects.front().geometry.bps_code.rows());
  model_ = std::make_unique<Denoiser>(dc, derive_seed(seed, 0x1417));
  model_->set_stats(corpus_.stats());
  schedule_ = make_schedule(config_.text("schedule"), static_cast<int>(config_.integer("diffusion_steps")));
  load_.mode = config_.text("mode");
  load_.max_frames = static_cast<int>(config_.integer("max_frames"));
  load_.max_text = static_cast<int>(config_.integer("max_text"));
  load_.k_max = static_cast<int>(config_.integer("k_max"));
  load_.shuffle_objects = config_.flag("shuffle_objects");
  const auto batch = config_.integer("batch_size");
  steps_per_epoch_ = config_.flag("overfit")
                         ? 1
                         : (static_cast<long long>(train.size()) + batch - 1) / batch;
}

std::unique_ptr<Trainer> Trainer::resume(const Corpus& corpus, const fs::path& dir) {
  Checkpoint ck = load_checkpoint(dir);
  require(ck.vocab.size() == corpus.vocabulary().size(), ErrorCode::kConfig,
          "resume: checkpoint vocabulary does not match the corpus");
  auto t = std::make_unique<Trainer>(corpus, ck.config);
  require(ck.model->config().num_objects == t->model_->config().num_objects, ErrorCode::kConfig,
          "resume: checkpoint object count does not match the corpus");
  t->model_ = std::move(ck.model);
  t->adam_.set_steps(ck.adam_steps);
  t->step_ = ck.step;
  t->best_val_ = ck.best_val;
  t->has_best_ = std::isfinite(ck.best_val);
  return t;
}

long long Trainer::total_steps() const {
  const long long max_steps = config_.integer("max_steps");
  return max_steps > 0 ? max_steps : config_.integer("epochs") * steps_per_epoch_;
}

Batch Trainer::batch_for(long long step) const {
  const auto seed = static_cast<std::uint64_t>(config_.integer("seed"));
  const std::uint64_t batch_seed =
      config_.flag("overfit") ? derive_seed(seed, 0xBA7C) : derive_seed(seed, 0xBA7C0000ull + step);
  return corpus_.load_batch("train", static_cast<int>(config_.integer("batch_size")), batch_seed, load_);
}

StepReport Trainer::step() {
  const auto seed = static_cast<std::uint64_t>(config_.integer("seed"));
  Rng rng(derive_seed(seed, 0x57E90000ull + static_cast<std::uint64_t>(step_)));
  const Batch batch = batch_for(step_);
  const double inv_b = 1.0 / static_cast<double>(batch.samples.size());
  const double cond_drop = config_.real("cond_drop");
  const bool use_dropout = config_.real("dropout") > 0.0;

  StepReport report;
  report.step = step_;
  report.epoch = step_ / steps_per_epoch_;
  model_->params().zero_grad();
  for (const Sample& s : batch.samples) {
    const Eigen::Index L = s.length;
    const Mat h0 = s.human.topRows(L), o0 = s.objects.topRows(L);
    const int t = rng.integer(0, schedule_.steps - 1);
    Mat nh(L, h0.cols()), no(L, o0.cols());
    for (Eigen::Index i = 0; i < nh.size(); ++i) nh.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < no.size(); ++i) no.data()[i] = rng.normal();
    const Mat xh = q_sample(h0, t, nh, schedule_), xo = q_sample(o0, t, no, schedule_);

    ConditionPack cond;
    cond.text = s.text;
    cond.text_tokens = s.tokens.ids;
    cond.k = s.k;
    cond.human_init = s.human_raw.topRows(s.k);
    cond.object_init = s.objects_raw.topRows(s.k);
    cond.geometry = s.geometry;
    MaskedCondition hc, oc;
    prepare_conditions(*model_, cond, static_cast<int>(L), &hc, &oc);
    const bool drop = rng.uniform() < cond_drop;

    nn::Tape tape;
    const auto [ph, po] =
        model_->forward(tape, xh, xo, hc, oc, cond, t, drop, use_dropout ? &rng : nullptr);
    Mat gh, go;
    const StepLosses l =
        sample_losses(ph.value(), po.value(), s, model_->stats(), body_, config_, &gh, &go);
    require(std::isfinite(l.total), ErrorCode::kNumerical,
            "train: non-finite loss at step " + std::to_string(step_) + " (sample " + s.id + ")");
    tape.accumulate(ph.id, gh * inv_b);
    tape.accumulate(po.id, go * inv_b);
    tape.backward();
    report.losses.total += l.total * inv_b;
    report.losses.rec += l.rec * inv_b;
    report.losses.parts.pos += l.parts.pos * inv_b;
    report.losses.parts.vel += l.parts.vel * inv_b;
    report.losses.parts.pen += l.parts.pen * inv_b;
    report.losses.parts.dis += l.parts.dis * inv_b;
  }
  report.grad_norm = model_->params().grad_norm();
  require(std::isfinite(report.grad_norm), ErrorCode::kNumerical,
          "train: non-finite gradient at step " + std::to_string(step_));
  report.lr = config_.learning_rate(report.epoch);
  adam_.step(model_->params(), report.lr);
  ++step_;
  return report;
}

double Trainer::validation_loss() const {
  auto seqs = corpus_.split("val");
  if (seqs.empty()) seqs = corpus_.split("train");
  const auto seed = static_cast<std::uint64_t>(config_.integer("seed"));
  Rng rng(derive_seed(seed, 0x7A11));
  LoadOptions opts = load_;
  opts.shuffle_objects = false;
  double total = 0.0;
  for (const HoiSequence* seq : seqs) {
    const Sample s = corpus_.make_sample(*seq, opts, rng);
    const Eigen::Index L = s.length;
    const int t = rng.integer(0, schedule_.steps - 1);
    Mat nh(L, s.human.cols()), no(L, s.objects.cols());
    for (Eigen::Index i = 0; i < nh.size(); ++i) nh.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < no.size(); ++i) no.data()[i] = rng.normal();
    ConditionPack cond;
    cond.text = s.text;
    cond.text_tokens = s.tokens.ids;
    cond.k = s.k;
    cond.human_init = s.human_raw.topRows(s.k);
    cond.object_init = s.objects_raw.topRows(s.k);
    cond.geometry = s.geometry;
    MaskedCondition hc, oc;
    prepare_conditions(*model_, cond, static_cast<int>(L), &hc, &oc);
    Mat ph, po;
    model_->predict_x0(q_sample(s.human, t, nh, schedule_), q_sample(s.objects, t, no, schedule_),
                       hc, oc, cond, t, false, &ph, &po);
    total += sample_losses(ph, po, s, model_->stats(), body_, config_).total;
  }
  return total / static_cast<double>(seqs.size());
}

void Trainer::save(const fs::path& dir) const {
  save_checkpoint(dir, *model_, config_, corpus_.vocabulary(), step_, adam_.steps(),
                  has_best_ ? best_val_ : std::numeric_limits<double>::quiet_NaN());
}

void Trainer::run(const fs::path& out_dir, std::ostream* progress) {
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "log.jsonl", std::ios::app);
  require(log.good(), ErrorCode::kIo, "train: cannot open " + (out_dir / "log.jsonl").string());
  std::string last_good = fs::exists(out_dir / "last" / "meta.json") ? (out_dir / "last").string() : "none";
  const long long total = total_steps();
  const long long log_every = config_.integer("log_every");
  const long long ckpt_every = config_.integer("checkpoint_every");
  while (step_ < total) {
    StepReport r;
    try {
      r = step();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNumerical) throw;
      log << json{{"type", "abort"}, {"step", step_}, {"error", e.what()}}.dump() << "\n";
      fail(ErrorCode::kNumerical, std::string(e.what()) + "; last good checkpoint: " + last_good);
    }
    if (step_ % log_every == 0 || step_ == total) {
      log << json{{"type", "step"},        {"step", step_},
                  {"epoch", r.epoch},      {"lr", r.lr},
                  {"grad_norm", r.grad_norm}, {"total", r.losses.total},
                  {"rec", r.losses.rec},   {"vel", r.losses.parts.vel},
                  {"pos", r.losses.parts.pos}, {"pen", r.losses.parts.pen},
                  {"dis", r.losses.parts.dis}}
                 .dump()
          << "\n";
      if (progress)
        *progress << "step " << step_ << "/" << total << " loss " << r.losses.total << "\n";
    }
    if (step_ % steps_per_epoch_ == 0) {
      const long long epoch = step_ / steps_per_epoch_;
      json line{{"type", "epoch"}, {"epoch", epoch}, {"step", step_}, {"lr", r.lr},
                {"train_total", r.losses.total}};
      if (config_.flag("validate")) {
        const double val = validation_loss();
        line["val_loss"] = val;
        if (std::isfinite(val) && (!has_best_ || val < best_val_)) {
          best_val_ = val;
          has_best_ = true;
          save(out_dir / "best");
        }
      }
      log << line.dump() << "\n";
      if (epoch % ckpt_every == 0) {
        save(out_dir / "last");
        last_good = (out_dir / "last").string();
      }
    }
    log.flush();
  }
  save(out_dir / "last");
}

}  // namespace himo
