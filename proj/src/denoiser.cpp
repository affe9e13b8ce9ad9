#include "himo/denoiser.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace himo {

using nn::Linear;
using nn::LayerNorm;
using nn::Tape;
using nn::Var;

void DenoiserConfig::validate() const {
  require(layers >= 1, ErrorCode::kConfig, "denoiser: layers must be >= 1");
  require(heads >= 1 && width % heads == 0, ErrorCode::kConfig,
          "denoiser: width must be divisible by heads");
  require(width % 2 == 0, ErrorCode::kConfig, "denoiser: width must be even");
  require(ff_mult >= 1 && geometry_width >= 1, ErrorCode::kConfig,
          "denoiser: ff_mult and geometry_width must be positive");
  require(num_objects >= 1 && num_joints >= 1, ErrorCode::kConfig,
          "denoiser: need at least one object and one joint");
  require(vocab_size >= 2, ErrorCode::kConfig, "denoiser: vocabulary needs pad and unk");
  require(diffusion_steps >= 2, ErrorCode::kConfig, "denoiser: diffusion_steps must be >= 2");
  require(dropout >= 0.0 && dropout < 1.0, ErrorCode::kConfig, "denoiser: dropout in [0, 1)");
  require(text_encoder == "fallback" || text_encoder == "frozen", ErrorCode::kConfig,
          "denoiser: text_encoder must be 'fallback' or 'frozen'");
}

// ---------------------------------------------------------------------------

FallbackTextEncoder::FallbackTextEncoder(nn::ParameterStore& store, int vocab, int width, Rng& rng)
    : vocab_(vocab) {
  table_ = &store.add("text.embedding", nn::normal_init(vocab, width, 0.1, rng));
  fc1_ = Linear::create(store, "text.fc1", width, width, rng);
  fc2_ = Linear::create(store, "text.fc2", width, width, rng);
}

Var FallbackTextEncoder::encode(Tape& tape, const std::vector<int>& tokens,
                                const std::string&) const {
  std::vector<int> ids;
  for (int id : tokens) {
    require(id >= 0 && id < vocab_, ErrorCode::kOutOfRange,
            "encode_text: token id " + std::to_string(id) + " outside the vocabulary");
    if (id != 0) ids.push_back(id);
  }
  if (ids.empty()) ids.push_back(0);
  const Var pooled = ad::mean_rows(ad::gather_rows(tape.param(*table_), ids));
  return fc2_(tape, ad::gelu(fc1_(tape, pooled)));
}

FrozenTextEncoder::FrozenTextEncoder(nn::ParameterStore& store, const std::filesystem::path& file,
                                     int width, Rng* rng) {
  std::ifstream in(file);
  require(in.good(), ErrorCode::kIo, "frozen text encoder: cannot open " + file.string());
  nlohmann::json j;
  try {
    in >> j;
    dim_ = j.at("dim").get<int>();
    for (const auto& [text, values] : j.at("embeddings").items()) {
      const auto v = values.get<std::vector<double>>();
      require(static_cast<int>(v.size()) == dim_, ErrorCode::kFormat,
              "frozen text encoder: vector for '" + text + "' has the wrong width");
      table_[text] = Eigen::Map<const Eigen::RowVectorXd>(v.data(), dim_);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("frozen text encoder: ") + e.what());
  }
  require(dim_ > 0, ErrorCode::kFormat, "frozen text encoder: dim must be positive");
  if (rng)
    proj_ = Linear::create(store, "text.proj", dim_, width, *rng);
  else
    proj_ = Linear::bind(store, "text.proj");
}

Var FrozenTextEncoder::encode(Tape& tape, const std::vector<int>&, const std::string& text) const {
  const auto it = table_.find(text);
  require(it != table_.end(), ErrorCode::kOutOfRange,
          "frozen text encoder: no embedding for '" + text + "'");
  return proj_(tape, tape.constant(it->second));
}

// ---------------------------------------------------------------------------

Mat sinusoidal_features(double position, int width) {
  const int half = width / 2;
  Mat f(1, width);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    f(0, i) = std::sin(position * freq);
    f(0, half + i) = std::cos(position * freq);
  }
  return f;
}

Mat positional_encoding(int count, int width) {
  Mat pe(count, width);
  for (int r = 0; r < count; ++r) pe.row(r) = sinusoidal_features(r, width);
  return pe;
}

Mat geometry_rows(const std::vector<ObjectGeometry>& geometry, int points) {
  Mat rows(static_cast<Eigen::Index>(geometry.size()), 3 * points);
  for (std::size_t o = 0; o < geometry.size(); ++o) {
    const Mat& code = geometry[o].bps_code;
    require(code.rows() == points && code.cols() == 3, ErrorCode::kShapeMismatch,
            "denoiser: geometry code must be " + std::to_string(points) + " x 3");
    for (int s = 0; s < points; ++s) rows.block<1, 3>(static_cast<Eigen::Index>(o), 3 * s) = code.row(s);
  }
  return rows;
}

// ---------------------------------------------------------------------------

Denoiser::Denoiser(DenoiserConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  build(&rng);
}

Denoiser::Denoiser(DenoiserConfig config) : Denoiser(std::move(config), 0) {}

void Denoiser::build(Rng* rng) {
  const int c = config_.width;
  const int ff = c * config_.ff_mult;
  if (config_.text_encoder == "fallback")
    text_ = std::make_unique<FallbackTextEncoder>(store_, config_.vocab_size, c, *rng);
  else
    text_ = std::make_unique<FrozenTextEncoder>(store_, config_.frozen_embeddings, c, rng);
  null_text_ = &store_.add("text.null", nn::normal_init(1, c, 0.1, *rng));
  time1_ = Linear::create(store_, "time.fc1", c, c, *rng);
  time2_ = Linear::create(store_, "time.fc2", c, c, *rng);
  cond_proj_ = Linear::create(store_, "cond.proj", 2 * c, c, *rng);
  geometry_ = Linear::create(store_, "geometry.proj", 3 * config_.geometry_points,
                             config_.geometry_width, *rng);
  human_in_ = Linear::create(store_, "human.in", 2 * config_.human_width() + 1, c, *rng);
  object_in_ = Linear::create(
      store_, "object.in",
      2 * config_.object_width() + 1 + config_.num_objects * config_.geometry_width, c, *rng);
  for (int i = 0; i < config_.layers; ++i) {
    for (const bool human : {true, false}) {
      const std::string p = "block" + std::to_string(i) + (human ? ".human." : ".object.");
      BranchBlock b;
      b.ln_self = LayerNorm::create(store_, p + "ln_self", c);
      b.q = Linear::create(store_, p + "self.q", c, c, *rng);
      b.k = Linear::create(store_, p + "self.k", c, c, *rng);
      b.v = Linear::create(store_, p + "self.v", c, c, *rng);
      b.o = Linear::create(store_, p + "self.o", c, c, *rng);
      b.ln_cross = LayerNorm::create(store_, p + "ln_cross", c);
      b.cross_q = Linear::create(store_, p + "cross.q", c, c, *rng);
      b.cross_k = Linear::create(store_, p + "cross.k", c, c, *rng);
      b.cross_v = Linear::create(store_, p + "cross.v", c, c, *rng);
      b.ln_ff = LayerNorm::create(store_, p + "ln_ff", c);
      b.ff1 = Linear::create(store_, p + "ff1", c, ff, *rng);
      b.ff2 = Linear::create(store_, p + "ff2", ff, c, *rng);
      (human ? human_blocks_ : object_blocks_).push_back(b);
    }
  }
  human_out_ln_ = LayerNorm::create(store_, "human.out_ln", c);
  object_out_ln_ = LayerNorm::create(store_, "object.out_ln", c);
  human_out_ = Linear::create(store_, "human.out", c, config_.human_width(), *rng);
  object_out_ = Linear::create(store_, "object.out", c, config_.object_width(), *rng);
}

Var Denoiser::encode_text(Tape& tape, const std::vector<int>& tokens,
                          const std::string& text) const {
  return text_->encode(tape, tokens, text);
}

Mat Denoiser::encode_text(const std::vector<int>& tokens, const std::string& text) const {
  Tape tape;
  tape.set_grad_enabled(false);
  return encode_text(tape, tokens, text).value();
}

Var Denoiser::null_text(Tape& tape) const { return tape.param(*null_text_); }

Var Denoiser::embed_conditions(Tape& tape, Var text_embedding, int t) const {
  require(t >= 0 && t < config_.diffusion_steps, ErrorCode::kOutOfRange,
          "embed_conditions: timestep out of range");
  const Var ts = tape.constant(sinusoidal_features(t, config_.width));
  const Var temb = time2_(tape, ad::gelu(time1_(tape, ts)));
  return cond_proj_(tape, ad::concat_cols({temb, text_embedding}));
}

std::pair<Var, Var> Denoiser::mutual_block_forward(Tape& tape, int layer, Var human, Var objects,
                                                   Rng* rng, BlockTrace* trace) const {
  require(human.rows() == objects.rows() && human.cols() == objects.cols(),
          ErrorCode::kShapeMismatch, "mutual block: human and object streams differ in shape");
  const BranchBlock& bh = block(layer, true);
  const BranchBlock& bo = block(layer, false);
  const int c = config_.width;
  const double p = rng ? config_.dropout : 0.0;
  auto drop = [&](Var x) { return p > 0.0 ? ad::dropout(x, p, *rng) : x; };

  std::vector<Mat>* hp = trace ? &trace->human_self_probs : nullptr;
  std::vector<Mat>* op = trace ? &trace->object_self_probs : nullptr;
  const double self_scale = 1.0 / std::sqrt(static_cast<double>(c / config_.heads));

  const Var nh = bh.ln_self(tape, human);
  const Var no = bo.ln_self(tape, objects);
  const Var eh = ad::add(human, drop(bh.o(tape, ad::attention(bh.q(tape, nh), bh.k(tape, nh),
                                                               bh.v(tape, nh), config_.heads,
                                                               self_scale, hp))));
  const Var eo = ad::add(objects, drop(bo.o(tape, ad::attention(bo.q(tape, no), bo.k(tape, no),
                                                                 bo.v(tape, no), config_.heads,
                                                                 self_scale, op))));

  // Queries from each branch's self-attention output, keys/values from the
  // other branch's block input.
  const double cross_scale = 1.0 / std::sqrt(static_cast<double>(c));
  std::vector<Mat> hcp, ocp;
  const Var ch = ad::attention(bh.cross_q(tape, bh.ln_cross(tape, eh)), bo.cross_k(tape, no),
                               bo.cross_v(tape, no), 1, cross_scale, &hcp);
  const Var co = ad::attention(bo.cross_q(tape, bo.ln_cross(tape, eo)), bh.cross_k(tape, nh),
                               bh.cross_v(tape, nh), 1, cross_scale, &ocp);
  const Var mh = ad::add(eh, drop(ch));
  const Var mo = ad::add(eo, drop(co));

  auto ff = [&](const BranchBlock& b, Var x) {
    return ad::add(x, drop(b.ff2(tape, ad::gelu(b.ff1(tape, b.ln_ff(tape, x))))));
  };
  const Var out_h = ff(bh, mh);
  const Var out_o = ff(bo, mo);

  if (trace) {
    trace->human_in = human.value();
    trace->object_in = objects.value();
    trace->human_self = eh.value();
    trace->object_self = eo.value();
    trace->human_cross = ch.value();
    trace->object_cross = co.value();
    trace->human_cross_probs = hcp[0];
    trace->object_cross_probs = ocp[0];
  }
  return {out_h, out_o};
}

std::pair<Var, Var> Denoiser::forward(Tape& tape, const Mat& xh, const Mat& xo,
                                      const MaskedCondition& hc, const MaskedCondition& oc,
                                      const ConditionPack& condition, int t, bool drop_text,
                                      Rng* rng, ForwardTrace* trace) const {
  const Eigen::Index frames = xh.rows();
  require(frames >= 1, ErrorCode::kShapeMismatch, "denoiser: empty sequence");
  require(xh.cols() == config_.human_width(), ErrorCode::kShapeMismatch,
          "denoiser: human stream width " + std::to_string(xh.cols()) + ", expected " +
              std::to_string(config_.human_width()));
  require(xo.rows() == frames && xo.cols() == config_.object_width(), ErrorCode::kShapeMismatch,
          "denoiser: object stream must be T x " + std::to_string(config_.object_width()));
  require(hc.values.rows() == frames && hc.values.cols() == config_.human_width() &&
              hc.indicator.size() == frames,
          ErrorCode::kShapeMismatch, "denoiser: human condition shape mismatch");
  require(oc.values.rows() == frames && oc.values.cols() == config_.object_width() &&
              oc.indicator.size() == frames,
          ErrorCode::kShapeMismatch, "denoiser: object condition shape mismatch");
  require(condition.num_objects() == config_.num_objects, ErrorCode::kShapeMismatch,
          "denoiser: geometry count differs from num_objects");

  const Var text = drop_text ? null_text(tape)
                             : encode_text(tape, condition.text_tokens, condition.text);
  const Var cond = embed_conditions(tape, text, t);
  if (trace) trace->condition_token = cond.value();

  const Mat pe = positional_encoding(static_cast<int>(frames) + 1, config_.width);
  const Var hin = human_in_(tape, tape.constant((Mat(frames, xh.cols() * 2 + 1) << xh, hc.stacked()).finished()));

  const Var geo = geometry_(tape, tape.constant(geometry_rows(condition.geometry, config_.geometry_points)));
  std::vector<Var> oparts{tape.constant((Mat(frames, xo.cols() * 2 + 1) << xo, oc.stacked()).finished())};
  for (int o = 0; o < config_.num_objects; ++o)
    oparts.push_back(ad::repeat_row(ad::slice_rows(geo, o, 1), frames));
  const Var oin = object_in_(tape, ad::concat_cols(oparts));

  Var h = ad::add_const(ad::concat_rows({cond, hin}), pe);
  Var ob = ad::add_const(ad::concat_rows({cond, oin}), pe);
  if (trace) trace->blocks.resize(static_cast<std::size_t>(config_.layers));
  for (int i = 0; i < config_.layers; ++i) {
    auto [nh, no] = mutual_block_forward(tape, i, h, ob, rng,
                                         trace ? &trace->blocks[static_cast<std::size_t>(i)] : nullptr);
    h = nh;
    ob = no;
  }
  const Var out_h = ad::slice_rows(human_out_(tape, human_out_ln_(tape, h)), 1, frames);
  const Var out_o = ad::slice_rows(object_out_(tape, object_out_ln_(tape, ob)), 1, frames);
  return {out_h, out_o};
}

void Denoiser::predict_x0(const Mat& xh, const Mat& xo, const MaskedCondition& hc,
                          const MaskedCondition& oc, const ConditionPack& condition, int t,
                          bool drop_text, Mat* x0h, Mat* x0o) const {
  Tape tape;
  tape.set_grad_enabled(false);
  auto [h, o] = forward(tape, xh, xo, hc, oc, condition, t, drop_text, nullptr);
  *x0h = h.value();
  *x0o = o.value();
}

}  // namespace himo
