#include "himo/diffusion.hpp"

#include <cmath>
#include <numbers>

namespace himo {

DiffusionSchedule make_schedule(const std::string& kind, int steps, double beta_start,
                                double beta_end) {
  require(steps >= 2, ErrorCode::kInvalidArgument, "make_schedule: need at least 2 steps");
  DiffusionSchedule s;
  s.kind = kind;
  s.steps = steps;
  s.beta.resize(steps);
  if (kind == "cosine") {
    constexpr double kOffset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + kOffset) / (1.0 + kOffset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int t = 0; t < steps; ++t)
      s.beta[t] = std::min(1.0 - f(t + 1) / f(t), 0.999);
  } else if (kind == "linear") {
    require(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end,
            ErrorCode::kInvalidArgument, "make_schedule: linear betas must satisfy 0 < b0 <= b1 < 1");
    for (int t = 0; t < steps; ++t)
      s.beta[t] = beta_start + (beta_end - beta_start) * t / (steps - 1);
  } else {
    fail(ErrorCode::kInvalidArgument, "make_schedule: unknown schedule kind '" + kind + "'");
  }
  s.alpha = Vec::Ones(steps) - s.beta;
  s.alpha_bar.resize(steps);
  double acc = 1.0;
  for (int t = 0; t < steps; ++t) s.alpha_bar[t] = acc *= s.alpha[t];
  return s;
}

Mat q_sample(const Mat& x0, int t, const Mat& noise, const DiffusionSchedule& schedule) {
  require(t >= 0 && t < schedule.steps, ErrorCode::kOutOfRange, "q_sample: timestep out of range");
  require(x0.rows() == noise.rows() && x0.cols() == noise.cols(), ErrorCode::kShapeMismatch,
          "q_sample: noise shape differs from x0");
  const double ab = schedule.alpha_bar[t];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

Mat MaskedCondition::stacked() const {
  Mat out(values.rows(), values.cols() + 1);
  out << values, indicator;
  return out;
}

MaskedCondition build_condition_mask(int frames, int k, const Mat& init_frames) {
  require(k >= 1, ErrorCode::kInvalidArgument, "build_condition_mask: k must be >= 1");
  require(k <= frames, ErrorCode::kInvalidArgument, "build_condition_mask: k exceeds sequence length");
  require(init_frames.rows() == k, ErrorCode::kShapeMismatch,
          "build_condition_mask: init frame count differs from k");
  MaskedCondition m;
  m.values = Mat::Zero(frames, init_frames.cols());
  m.values.topRows(k) = init_frames;
  m.indicator = Vec::Zero(frames);
  m.indicator.head(k).setOnes();
  return m;
}

void ConditionPack::validate(int frames) const {
  require(k >= 1 && k <= frames, ErrorCode::kInvalidArgument,
          "condition: k must lie in [1, T]");
  require(human_init.rows() == k, ErrorCode::kShapeMismatch,
          "condition: human_init must have k rows");
  require(object_init.rows() == k && object_init.cols() == num_objects() * kObjectFeatureWidth,
          ErrorCode::kShapeMismatch, "condition: object_init must be k x (N_o * 9)");
  require(human_init.allFinite() && object_init.allFinite(), ErrorCode::kInvalidArgument,
          "condition: non-finite initial frames");
}

void prepare_conditions(const DenoiserInterface& model, const ConditionPack& condition,
                        int frames, MaskedCondition* human, MaskedCondition* objects) {
  condition.validate(frames);
  require(condition.num_objects() == model.num_objects(), ErrorCode::kShapeMismatch,
          "sample: condition has " + std::to_string(condition.num_objects()) +
              " objects, model expects " + std::to_string(model.num_objects()));
  require(condition.human_init.cols() == model.human_width(), ErrorCode::kShapeMismatch,
          "sample: human condition width differs from the model");
  const NormStats& st = model.stats();
  *human = build_condition_mask(frames, condition.k, st.normalize_human(condition.human_init));
  *objects = build_condition_mask(frames, condition.k, st.normalize_objects(condition.object_init));
}

namespace {

void project_block(Mat& m, Eigen::Index col) {
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    const Rot6d r = m.block<1, 6>(t, col).transpose();
    m.block<1, 6>(t, col) = matrix_to_rot6d(rot6d_to_matrix_stable(r)).transpose();
  }
}

}  // namespace

void project_rotations(Mat& human, int num_joints, Mat& objects) {
  for (int j = 0; j < num_joints; ++j) project_block(human, 3 * num_joints + 6 * j);
  for (Eigen::Index o = 0; o < objects.cols() / kObjectFeatureWidth; ++o)
    project_block(objects, o * kObjectFeatureWidth);
}

SampleResult sample(const DenoiserInterface& model, const ConditionPack& condition, int frames,
                    const DiffusionSchedule& schedule, std::uint64_t seed, double guidance_scale) {
  MaskedCondition hc, oc;
  prepare_conditions(model, condition, frames, &hc, &oc);
  const int dh = model.human_width();
  const int dob = model.num_objects() * kObjectFeatureWidth;

  Rng rng(seed);
  auto noise = [&](int cols) {
    Mat z(frames, cols);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
    return z;
  };
  Mat xh = noise(dh), xo = noise(dob);
  SampleResult result;
  Mat x0h, x0o, uh, uo;
  for (int t = schedule.steps - 1; t >= 0; --t) {
    if (guidance_scale == 0.0) {
      model.predict_x0(xh, xo, hc, oc, condition, t, true, &x0h, &x0o);
      ++result.denoiser_calls;
    } else {
      model.predict_x0(xh, xo, hc, oc, condition, t, false, &x0h, &x0o);
      ++result.denoiser_calls;
      if (guidance_scale != 1.0) {
        model.predict_x0(xh, xo, hc, oc, condition, t, true, &uh, &uo);
        ++result.denoiser_calls;
        x0h = uh + guidance_scale * (x0h - uh);
        x0o = uo + guidance_scale * (x0o - uo);
      }
    }
    if (t == 0) {
      xh = x0h;
      xo = x0o;
      break;
    }
    const double ab = schedule.alpha_bar[t], ab_prev = schedule.alpha_bar[t - 1];
    const double beta = schedule.beta[t];
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(schedule.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    xh = c0 * x0h + ct * xh + sigma * noise(dh);
    xo = c0 * x0o + ct * xo + sigma * noise(dob);
  }

  const NormStats& st = model.stats();
  result.human = st.denormalize_human(xh);
  result.objects = st.denormalize_objects(xo);
  const int joints = (dh - 3) / 9;
  project_rotations(result.human, joints, result.objects);
  result.human.topRows(condition.k) = condition.human_init;
  result.objects.topRows(condition.k) = condition.object_init;
  return result;
}

}  // namespace himo
