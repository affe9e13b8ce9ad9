#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "himo/archive.hpp"
#include "himo/composer.hpp"
#include "himo/corpus.hpp"
#include "himo/evalsuite.hpp"
#include "himo/rigid_fit.hpp"
#include "himo/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace himo;

namespace {

void print(const json& j) { std::cout << j.dump(1) << std::endl; }

void write_json(const fs::path& path, const json& j) {
  const std::string text = j.dump(1);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

/// Sidecar recording how an output directory was produced.
void write_run_info(const fs::path& dir, const std::string& command, const RunConfig& config,
                    std::uint64_t seed, const json& extra = {}) {
  json j{{"schema_version", kCheckpointSchemaVersion},
         {"command", command},
         {"seed", seed},
         {"run_config", json::parse(config.to_json())}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_json(dir / "run.json", j);
}

const HoiSequence& pick_sequence(const Corpus& corpus, const std::string& id) {
  if (!id.empty()) return corpus.sequence(id);
  for (const char* split : {"test", "val", "train"}) {
    const auto s = corpus.split(split);
    if (!s.empty()) return *s.front();
  }
  fail(ErrorCode::kOutOfRange, "corpus has no sequences");
}

HoiSequence to_sequence(const SampleResult& r, const std::vector<ObjectGeometry>& geometry,
                        int num_joints, double fps, const std::string& id, const std::string& text) {
  HoiSequence seq;
  seq.id = id;
  seq.text = text;
  seq.human = HumanMotion::unflatten(r.human, num_joints, fps);
  for (std::size_t o = 0; o < geometry.size(); ++o) {
    ObjectTrack t;
    const Mat block = r.objects.middleCols(static_cast<Eigen::Index>(o) * kObjectFeatureWidth,
                                           kObjectFeatureWidth);
    t.rotation = block.leftCols(6);
    t.translation = block.rightCols(3);
    t.geometry = geometry[o];
    seq.objects.push_back(std::move(t));
  }
  seq.segments.push_back({0, seq.frames(), text});
  seq.validate();
  return seq;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out;
  int num = 64, objects = 2, min_frames = 60, max_frames = 90, min_segments = 2, max_segments = 3;
  double fps = 15.0;
  std::uint64_t seed = 7;
};

void cmd_gen_data(const GenArgs& a) {
  CorpusConfig c;
  c.num_sequences = a.num;
  c.num_objects = a.objects;
  c.min_frames = a.min_frames;
  c.max_frames = a.max_frames;
  c.min_segments = a.min_segments;
  c.max_segments = a.max_segments;
  c.fps = a.fps;
  c.seed = a.seed;
  const CorpusManifest m = generate_synthetic_corpus(c, a.out);
  print({{"command", "gen-data"},
         {"out", a.out},
         {"sequences", m.ids.size()},
         {"train", m.split_ids("train").size()},
         {"test", m.split_ids("test").size()},
         {"val", m.split_ids("val").size()},
         {"seed", a.seed}});
}

struct TrainArgs {
  std::string data, out, config_file, profile = "desk", resume;
  std::vector<std::string> set;
  std::uint64_t seed = 7;
  bool seed_given = false;
  bool quiet = false;
};

RunConfig build_config(const TrainArgs& a) {
  RunConfig c = a.config_file.empty() ? RunConfig::profile(a.profile) : RunConfig::from_file(a.config_file);
  for (const auto& kv : a.set) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorCode::kConfig, "--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed_given) c.set_value("seed", static_cast<std::int64_t>(a.seed));
  c.validate();
  return c;
}

void cmd_train(const TrainArgs& a) {
  const Corpus corpus = Corpus::load(a.data);
  std::unique_ptr<Trainer> trainer;
  if (!a.resume.empty()) {
    trainer = Trainer::resume(corpus, a.resume);
  } else {
    trainer = std::make_unique<Trainer>(corpus, build_config(a));
  }
  trainer->run(a.out, a.quiet ? nullptr : &std::cerr);
  const double val = trainer->validation_loss();
  print({{"command", "train"},
         {"out", a.out},
         {"steps", trainer->steps_done()},
         {"steps_per_epoch", trainer->steps_per_epoch()},
         {"val_loss", val},
         {"checkpoint", (fs::path(a.out) / "last").string()},
         {"seed", trainer->config().integer("seed")}});
}

struct SampleArgs {
  std::string ckpt, data, text, id, out;
  int frames = 0;
  double guidance = -1.0;
  std::uint64_t seed = 7;
};

void cmd_sample(const SampleArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Corpus corpus = Corpus::load(a.data);
  require(corpus.manifest().num_objects == ck.model->num_objects(), ErrorCode::kConfig,
          "sample: the corpus object count does not match the checkpoint");
  const HoiSequence& init = pick_sequence(corpus, a.id);
  const int frames = a.frames > 0 ? a.frames : std::min<int>(init.frames(), static_cast<int>(ck.config.integer("max_frames")));
  const std::string text = a.text.empty() ? init.text : a.text;
  ConditionPack cond;
  cond.text = text;
  cond.text_tokens = ck.vocab.encode(text, static_cast<int>(ck.config.integer("max_text"))).ids;
  cond.k = 1;
  std::vector<int> order(init.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  cond.human_init = init.human.flatten().topRows(1);
  cond.object_init = pack_objects(init.objects, order).topRows(1);
  for (const auto& t : init.objects) cond.geometry.push_back(t.geometry);
  const DiffusionSchedule sched = make_schedule(ck.config.text("schedule"), ck.model->config().diffusion_steps);
  const double g = a.guidance >= 0 ? a.guidance : ck.config.real("guidance_scale");
  const SampleResult r = sample(*ck.model, cond, frames, sched, a.seed, g);
  const HoiSequence seq = to_sequence(r, cond.geometry, ck.model->config().num_joints, init.fps(),
                                      "sample", text);
  write_archive(a.out, seq);
  write_run_info(a.out, "sample", ck.config, a.seed,
                 {{"checkpoint", a.ckpt}, {"initial_sequence", init.id}, {"guidance_scale", g}});
  print({{"command", "sample"},
         {"out", a.out},
         {"frames", frames},
         {"denoiser_calls", r.denoiser_calls},
         {"initial_sequence", init.id},
         {"guidance_scale", g},
         {"seed", a.seed}});
}

struct ComposeArgs {
  std::string ckpt, data, script, id, out;
  int k = kDefaultOverlap;
  double guidance = -1.0;
  std::uint64_t seed = 7;
};

void cmd_compose(const ComposeArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const Corpus corpus = Corpus::load(a.data);
  const auto bytes = read_file_bytes(a.script);
  const TimelineScript script = TimelineScript::from_json(std::string(bytes.begin(), bytes.end()), a.k);
  const HoiSequence& init = pick_sequence(corpus, a.id);
  InitialState st;
  std::vector<int> order(init.objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  st.human = init.human.flatten().topRows(1);
  st.objects = pack_objects(init.objects, order).topRows(1);
  for (const auto& t : init.objects) st.geometry.push_back(t.geometry);
  const DiffusionSchedule sched = make_schedule(ck.config.text("schedule"), ck.model->config().diffusion_steps);
  ComposeOptions opts;
  opts.guidance_scale = a.guidance >= 0 ? a.guidance : ck.config.real("guidance_scale");
  ComposedTimeline partial;
  ComposedTimeline tl;
  try {
    tl = compose_timeline(*ck.model, ck.vocab, script, st, sched, a.seed, opts, &partial);
  } catch (const Error& e) {
    std::cerr << json{{"partial", {{"completed_segments", partial.clip_human.size()}}}}.dump() << "\n";
    throw;
  }
  const HoiSequence seq =
      timeline_to_sequence(tl, script, ck.model->config().num_joints, init.fps(), "timeline");
  write_archive(a.out, seq);
  write_run_info(a.out, "compose", ck.config, a.seed,
                 {{"checkpoint", a.ckpt}, {"script", a.script}, {"k", a.k}});
  print({{"command", "compose"},
         {"out", a.out},
         {"frames", tl.frames()},
         {"expected_frames", script.total_length()},
         {"segments", script.segments()},
         {"k", a.k},
         {"boundaries", tl.boundaries},
         {"transition_jerk", tl.transition},
         {"denoiser_calls", tl.denoiser_calls},
         {"seed", a.seed}});
}

struct EvalArgs {
  std::string ckpt, extractors, data, split = "test", out;
  int reps = 20, pool = 32, top_k = 3, diversity_subset = 50, mm_samples = 10, mm_texts = 10;
  int ext_steps = 400;
  double guidance = -1.0;
  std::uint64_t seed = 7;
};

void cmd_eval(const EvalArgs& a) {
  const Corpus corpus = Corpus::load(a.data);
  bool trained = false;
  ExtractorTrainLog tlog;
  if (!fs::exists(fs::path(a.extractors) / "meta.json")) {
    ExtractorConfig ec;
    ec.steps = a.ext_steps;
    FeatureExtractors ex = train_extractors(corpus, ec, a.seed, &tlog);
    ex.save(a.extractors);
    trained = true;
  }
  const FeatureExtractors ex = FeatureExtractors::load(a.extractors);
  const auto items = eval_items(corpus, a.split, ex.config().max_text, ex.config().max_frames);

  EvalOptions o;
  o.repetitions = a.reps;
  o.pool_size = a.pool;
  o.top_k = a.top_k;
  o.diversity_subset = a.diversity_subset;
  o.mm_samples = a.mm_samples;
  o.mm_texts = a.mm_texts;
  o.seed = a.seed;

  std::unique_ptr<Checkpoint> ck;
  Generator gen;
  DiffusionSchedule sched;
  if (!a.ckpt.empty()) {
    ck = std::make_unique<Checkpoint>(load_checkpoint(a.ckpt));
    require(ck->vocab.size() == corpus.vocabulary().size(), ErrorCode::kConfig,
            "eval: checkpoint vocabulary does not match the corpus");
    sched = make_schedule(ck->config.text("schedule"), ck->model->config().diffusion_steps);
    o.guidance_scale = a.guidance >= 0 ? a.guidance : ck->config.real("guidance_scale");
    gen = [&](const EvalItem& it, std::uint64_t seed) {
      return sample(*ck->model, it.condition, it.frames, sched, seed, o.guidance_scale);
    };
  } else {
    o.guidance_scale = 0.0;
  }
  MetricReport report = evaluate(ex, items, gen, o);
  report.config["split"] = a.split;
  report.config["checkpoint"] = a.ckpt.empty() ? "none" : a.ckpt;
  report.config["schema_version"] = std::to_string(kCheckpointSchemaVersion);
  if (ck) report.config["run_config"] = ck->config.to_json();
  write_json(a.out, json::parse(report.to_json()));
  json summary{{"command", "eval"}, {"out", a.out}, {"items", items.size()},
               {"extractors_trained", trained}, {"seed", a.seed}};
  for (const auto& [k, v] : report.metrics) summary[k] = {{"mean", v.mean}, {"ci95", v.ci95}};
  print(summary);
}

struct FitArgs {
  std::string data, id, out, model = "toy";
  int iterations = 500;
  double noise_mm = 0.0;
  int markers = 8;
  std::uint64_t seed = 7;
};

void cmd_fit(const FitArgs& a) {
  const Corpus corpus = Corpus::load(a.data);
  const HoiSequence& seq = pick_sequence(corpus, a.id);
  require(a.model == "toy", ErrorCode::kConfig, "fit: only the toy body model is bundled");
  const ToyBodyModel model;
  const RunConfig rc = RunConfig::profile("desk");
  Rng rng(a.seed);
  const double sigma = a.noise_mm * 1e-3;
  const int J = seq.human.num_joints;
  std::vector<Mat> targets;
  for (int t = 0; t < seq.frames(); ++t) {
    Mat m(J, 3);
    for (int j = 0; j < J; ++j)
      for (int c = 0; c < 3; ++c) m(j, c) = seq.human.positions(t, 3 * j + c) + sigma * rng.normal();
    targets.push_back(std::move(m));
  }
  FitConfig fc;
  fc.weights = rc.fit_weights();
  fc.max_iterations = a.iterations;
  const FitResult fit = fit_body(targets, model, fc);
  double err = 0.0;
  for (int t = 0; t < seq.frames(); ++t) {
    const Mat joints = model.forward(fit.params[static_cast<std::size_t>(t)]);
    for (int j = 0; j < J; ++j) err += (joints.row(j) - seq.human.positions.block<1, 3>(t, 3 * j)).norm();
  }
  err /= static_cast<double>(seq.frames() * J);

  json objects = json::array();
  for (const auto& track : seq.objects) {
    const int n = std::min<int>(a.markers, static_cast<int>(track.geometry.surface_samples.rows()));
    const Mat rest = track.geometry.surface_samples.topRows(n);
    std::vector<Mat> observed;
    for (int t = 0; t < track.frames(); ++t) {
      Mat m = track.world_samples(t).topRows(n);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += sigma * rng.normal();
      observed.push_back(std::move(m));
    }
    const RigidTrack rt = track_rigid_object(rest, observed, Vec3::Zero());
    double terr = 0.0;
    for (int t = 0; t < track.frames(); ++t)
      terr += (rt.centroids[static_cast<std::size_t>(t)] - track.translation.row(t).transpose()).squaredNorm();
    objects.push_back({{"name", track.geometry.name},
                       {"translation_rmse_m", std::sqrt(terr / track.frames())}});
  }
  json out{{"command", "fit"},
           {"sequence", seq.id},
           {"mean_joint_error_m", err},
           {"iterations", fit.iterations},
           {"converged", fit.converged},
           {"energy", {{"joint", fit.energy.joint}, {"smooth", fit.energy.smooth},
                       {"reg", fit.energy.reg}, {"total", fit.energy.total}}},
           {"noise_mm", a.noise_mm},
           {"objects", objects},
           {"weights", {{"alpha", fc.weights.joint}, {"lambda", fc.weights.smooth},
                        {"gamma", fc.weights.reg}}},
           {"seed", a.seed}};
  if (!a.out.empty()) write_json(a.out, out);
  print(out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"himo: text-conditioned human-object interaction synthesis at desk scale"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a synthetic corpus");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--num", gen.num, "number of sequences");
  g->add_option("--objects", gen.objects, "objects per sequence");
  g->add_option("--min-frames", gen.min_frames);
  g->add_option("--max-frames", gen.max_frames);
  g->add_option("--min-segments", gen.min_segments);
  g->add_option("--max-segments", gen.max_segments);
  g->add_option("--fps", gen.fps);
  g->add_option("--seed", gen.seed);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the denoiser");
  t->add_option("--data", tr.data, "corpus directory")->required();
  t->add_option("--out", tr.out, "run directory")->required();
  t->add_option("--config", tr.config_file, "flat JSON config file");
  t->add_option("--profile", tr.profile, "desk | fidelity | overfit");
  t->add_option("--set", tr.set, "key=value override (repeatable)");
  t->add_option("--resume", tr.resume, "checkpoint directory to continue from");
  auto* tseed = t->add_option("--seed", tr.seed);
  t->add_flag("--quiet", tr.quiet);

  SampleArgs sa;
  auto* s = app.add_subcommand("sample", "sample one sequence");
  s->add_option("--ckpt", sa.ckpt)->required();
  s->add_option("--data", sa.data, "corpus providing the initial state and geometry")->required();
  s->add_option("--text", sa.text);
  s->add_option("--id", sa.id, "sequence whose first frame is the condition");
  s->add_option("--frames", sa.frames);
  s->add_option("--guidance", sa.guidance);
  s->add_option("--out", sa.out)->required();
  s->add_option("--seed", sa.seed);

  ComposeArgs ca;
  auto* c = app.add_subcommand("compose", "autoregressive multi-segment generation");
  c->add_option("--ckpt", ca.ckpt)->required();
  c->add_option("--data", ca.data)->required();
  c->add_option("--script", ca.script, "JSON list of {text, length}")->required();
  c->add_option("--id", ca.id);
  c->add_option("--k", ca.k);
  c->add_option("--guidance", ca.guidance);
  c->add_option("--out", ca.out)->required();
  c->add_option("--seed", ca.seed);

  EvalArgs ea;
  auto* e = app.add_subcommand("eval", "metric battery with confidence intervals");
  e->add_option("--ckpt", ea.ckpt, "denoiser checkpoint (omit to score the ground truth)");
  e->add_option("--extractors", ea.extractors, "extractor directory (trained when missing)")->required();
  e->add_option("--data", ea.data)->required();
  e->add_option("--split", ea.split);
  e->add_option("--reps", ea.reps);
  e->add_option("--pool", ea.pool);
  e->add_option("--top-k", ea.top_k);
  e->add_option("--diversity-subset", ea.diversity_subset);
  e->add_option("--mm-samples", ea.mm_samples);
  e->add_option("--mm-texts", ea.mm_texts);
  e->add_option("--ext-steps", ea.ext_steps);
  e->add_option("--guidance", ea.guidance);
  e->add_option("--out", ea.out)->required();
  e->add_option("--seed", ea.seed);

  FitArgs fa;
  auto* f = app.add_subcommand("fit", "fit the body model and rigid objects to a sequence");
  f->add_option("--data", fa.data)->required();
  f->add_option("--id", fa.id);
  f->add_option("--iterations", fa.iterations);
  f->add_option("--noise-mm", fa.noise_mm);
  f->add_option("--markers", fa.markers);
  f->add_option("--model", fa.model, "body model (toy)");
  f->add_option("--out", fa.out);
  f->add_option("--seed", fa.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }

  try {
    if (*g) cmd_gen_data(gen);
    if (*t) {
      tr.seed_given = tseed->count() > 0;
      cmd_train(tr);
    }
    if (*s) cmd_sample(sa);
    if (*c) cmd_compose(ca);
    if (*e) cmd_eval(ea);
    if (*f) cmd_fit(fa);
  } catch (const Error& err) {
    std::cerr << json{{"error", {{"code", std::string(to_string(err.code()))}, {"message", err.what()}}}}.dump()
              << std::endl;
    return 2;
  } catch (const std::exception& err) {
    std::cerr << json{{"error", {{"code", "internal"}, {"message", err.what()}}}}.dump() << std::endl;
    return 3;
  }
  return 0;
}
