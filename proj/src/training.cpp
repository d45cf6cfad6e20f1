#include "dlab/training.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dlab/parameterizations.hpp"
#include "dlab/rng.hpp"

namespace dlab {
namespace {

void check_batch(const Tensor& x0, const Tensor& noise) {
  if (x0.cols() == 0) throw std::invalid_argument("training: empty batch");
  if (x0.rows() != noise.rows() || x0.cols() != noise.cols())
    throw std::invalid_argument("training: data/noise shape mismatch");
}

void check_time_range(const Eigen::VectorXi& t, int T) {
  for (Eigen::Index j = 0; j < t.size(); ++j)
    if (t(j) < 1 || t(j) > T) throw std::invalid_argument("training: time index out of range");
}

/// Mean over columns of the per-column squared norm, with an optional
/// per-column weight applied first.
ad::Var weighted_mean_sq(const ad::Var& diff, const Eigen::RowVectorXd* weights) {
  ad::Var per_col = ad::colwise_squared_norm(diff);
  if (weights != nullptr) per_col = ad::colwise_scale(per_col, *weights);
  return ad::mean_all(per_col);
}

}  // namespace

void TrainConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("training: learning rate must be positive");
  if (batch < 1) throw std::invalid_argument("training: batch must be at least 1");
  if (steps < 0) throw std::invalid_argument("training: negative step count");
  if (huber_c < 0.0) throw std::invalid_argument("training: pseudo-Huber c must be positive");
  if (optimizer != "sgd" && optimizer != "adam")
    throw std::invalid_argument("training: unknown optimizer '" + optimizer + "'");
  if (ct_policy != "constant" && ct_policy != "shrinking")
    throw std::invalid_argument("training: unknown ct policy '" + ct_policy + "'");
  if (cond_dropout < 0.0 || cond_dropout > 1.0)
    throw std::invalid_argument("training: cond_dropout must lie in [0, 1]");
}

std::function<double(int)> make_weighting(const std::string& name, const VpDiscreteSchedule& s,
                                          int dim, double scale) {
  if (name == "default" || name.empty()) {
    // Cancels the score normalization exactly, recovering the plain noise loss.
    return [&s](int t) { return s.b(t); };
  }
  if (name == "sigma2") {
    return [&s, scale](int t) { return scale * s.one_minus_abar(t); };
  }
  if (name == "inv-score-norm") {
    // 1 / E ||score of the per-sample noising kernel||^2 = (1 - abar) / dim.
    return [&s, dim, scale](int t) { return scale * s.one_minus_abar(t) / dim; };
  }
  throw std::invalid_argument("training: unknown weighting '" + name + "'");
}

ad::Var loss_diffusion(ad::GradientTape& tape, const DenoiserModel& model,
                       const DenoiserModel::Bound& bound, const Tensor& x0, const Tensor* cond,
                       const VpDiscreteSchedule& s, Pred kind, const Eigen::VectorXi& t,
                       const Tensor& noise) {
  check_batch(x0, noise);
  check_time_range(t, s.T);
  if (kind != Pred::kEps && kind != Pred::kX0 && kind != Pred::kVDiff)
    throw std::invalid_argument("training: diffusion loss supports eps, x0 and v heads");
  if (model.spec().head != kind)
    throw std::invalid_argument("training: model head does not match the requested objective");

  const Eigen::Index n = x0.cols();
  Tensor x_t = x0, target(x0.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double a = s.a(t(j)), b = std::sqrt(s.one_minus_abar(t(j)));
    x_t.col(j) = a * x0.col(j) + b * noise.col(j);
    switch (kind) {
      case Pred::kEps: target.col(j) = noise.col(j); break;
      case Pred::kX0: target.col(j) = x0.col(j); break;
      default: target.col(j) = b * x0.col(j) - a * noise.col(j); break;
    }
  }
  ad::Var pred = model.forward(tape, bound, tape.constant(x_t), t.cast<double>(), cond);
  return weighted_mean_sq(pred - tape.constant(target), nullptr);
}

ad::Var loss_diffusion(ad::GradientTape& tape, const DenoiserModel& model,
                       const DenoiserModel::Bound& bound, const Tensor& x0, const Tensor* cond,
                       const VpDiscreteSchedule& s, Pred kind, std::uint64_t seed,
                       std::uint64_t step) {
  Eigen::VectorXi t = rng::uniform_int_vector(x0.cols(), 1, s.T, seed, rng::kTime, step);
  Tensor noise = rng::normal_matrix(x0.rows(), x0.cols(), seed, rng::kLossNoise, step);
  return loss_diffusion(tape, model, bound, x0, cond, s, kind, t, noise);
}

ad::Var loss_score_matching(ad::GradientTape& tape, const DenoiserModel& model,
                            const DenoiserModel::Bound& bound, const Tensor& x0,
                            const VpDiscreteSchedule& s, const std::function<double(int)>& w,
                            const Eigen::VectorXi& t, const Tensor& noise) {
  check_batch(x0, noise);
  check_time_range(t, s.T);
  if (model.spec().head != Pred::kEps)
    throw std::invalid_argument("training: score matching expects a noise-predicting head");

  const Eigen::Index n = x0.cols();
  Tensor x_t = x0;
  Eigen::RowVectorXd coef(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double a = s.a(t(j)), b = std::sqrt(s.one_minus_abar(t(j)));
    x_t.col(j) = a * x0.col(j) + b * noise.col(j);
    coef(j) = w(t(j)) / b;
  }
  ad::Var pred = model.forward(tape, bound, tape.constant(x_t), t.cast<double>(), nullptr);
  return weighted_mean_sq(pred - tape.constant(noise), &coef);
}

ad::Var loss_score_matching(ad::GradientTape& tape, const DenoiserModel& model,
                            const DenoiserModel::Bound& bound, const Tensor& x0,
                            const VpDiscreteSchedule& s, const std::function<double(int)>& w,
                            std::uint64_t seed, std::uint64_t step) {
  Eigen::VectorXi t = rng::uniform_int_vector(x0.cols(), 1, s.T, seed, rng::kTime, step);
  Tensor noise = rng::normal_matrix(x0.rows(), x0.cols(), seed, rng::kLossNoise, step);
  return loss_score_matching(tape, model, bound, x0, s, w, t, noise);
}

ad::Var loss_consistency_training(ad::GradientTape& tape, const DenoiserModel& model,
                                  const DenoiserModel::Bound& bound, const Tensor& x0,
                                  const VeSchedule& s, int grid_n, int interval,
                                  const Eigen::VectorXi& idx, const Tensor& noise,
                                  double huber_c, double lambda) {
  check_batch(x0, noise);
  if (model.spec().head != Pred::kFCons)
    throw std::invalid_argument("training: consistency training expects a clean-sample head");
  if (grid_n < 2) throw std::invalid_argument("training: consistency grid needs two points");
  if (interval < 1 || interval >= grid_n)
    throw std::invalid_argument("training: consistency interval out of range");

  std::vector<double> grid = s.grid(grid_n);
  const Eigen::Index n = x0.cols();
  Eigen::VectorXd t_lo(n), t_hi(n);
  Tensor x_lo = x0, x_hi = x0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (idx(j) < 1 || idx(j) > grid_n - interval)
      throw std::invalid_argument("training: consistency grid index out of range");
    t_lo(j) = grid[idx(j) - 1];
    t_hi(j) = grid[idx(j) - 1 + interval];
    x_lo.col(j) += s.noise_scale(t_lo(j)) * noise.col(j);
    x_hi.col(j) += s.noise_scale(t_hi(j)) * noise.col(j);
  }

  HeadCoefs head = edm_head_coefs(t_hi, s);
  ad::Var raw = model.forward(tape, bound, tape.constant(x_hi), t_hi, nullptr);
  ad::Var f = ad::colwise_scale(tape.constant(x_hi), head.c_skip) +
              ad::colwise_scale(raw, head.c_out);

  Tensor target = consistency_head_edm(model(x_lo, t_lo, nullptr, /*use_ema=*/true), x_lo, t_lo, s);

  ad::Var per_col = ad::colwise_squared_norm(f - tape.constant(target));
  if (huber_c > 0.0)
    per_col = ad::add_scalar(ad::sqrt_of(ad::add_scalar(per_col, huber_c * huber_c)), -huber_c);
  return ad::mean_all(lambda * per_col);
}

ad::Var loss_consistency_training(ad::GradientTape& tape, const DenoiserModel& model,
                                  const DenoiserModel::Bound& bound, const Tensor& x0,
                                  const VeSchedule& s, int grid_n, int interval,
                                  std::uint64_t seed, std::uint64_t step, double huber_c,
                                  double lambda) {
  Eigen::VectorXi idx =
      rng::uniform_int_vector(x0.cols(), 1, grid_n - interval, seed, rng::kTime, step);
  Tensor noise = rng::normal_matrix(x0.rows(), x0.cols(), seed, rng::kLossNoise, step);
  return loss_consistency_training(tape, model, bound, x0, s, grid_n, interval, idx, noise,
                                   huber_c, lambda);
}

ad::Var loss_rectified_flow(ad::GradientTape& tape, const DenoiserModel& model,
                            const DenoiserModel::Bound& bound, const Tensor& y1,
                            const Tensor& y0, const RfSchedule& s, const Eigen::VectorXd& t) {
  check_batch(y1, y0);
  if (model.spec().head != Pred::kVRf)
    throw std::invalid_argument("training: rectified flow expects a flow-velocity head");

  const Eigen::Index n = y1.cols();
  Tensor y_t(y1.rows(), n), target(y1.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (t(j) < 0.0 || t(j) > 1.0)
      throw std::invalid_argument("training: flow time outside [0, 1]");
    y_t.col(j) = s.data_coef(t(j)) * y1.col(j) + s.noise_coef(t(j)) * y0.col(j);
    target.col(j) = y1.col(j) - (1.0 - s.sigma_min) * y0.col(j);
  }
  ad::Var pred = model.forward(tape, bound, tape.constant(y_t), t, nullptr);
  return weighted_mean_sq(pred - tape.constant(target), nullptr);
}

ad::Var loss_rectified_flow(ad::GradientTape& tape, const DenoiserModel& model,
                            const DenoiserModel::Bound& bound, const Tensor& y1,
                            const RfSchedule& s, std::uint64_t seed, std::uint64_t step) {
  Eigen::VectorXd t = rng::uniform_vector(y1.cols(), seed, rng::kTime, step);
  Tensor y0 = rng::normal_matrix(y1.rows(), y1.cols(), seed, rng::kLossNoise, step);
  return loss_rectified_flow(tape, model, bound, y1, y0, s, t);
}

namespace {

/// Common trig-path setup: x_t, the path derivative dx_t/dt and the velocity
/// target, all with noise scaled to sigma_data.
struct TrigDraw {
  Tensor x_t, x_dot, target;
};
TrigDraw trig_path(const Tensor& x0, const TrigSchedule& s, const Eigen::VectorXd& t,
                   const Tensor& unit_noise) {
  TrigDraw d;
  const Eigen::Index n = x0.cols();
  d.x_t.resize(x0.rows(), n);
  d.x_dot.resize(x0.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (t(j) < 0.0 || t(j) > s.t_hi())
      throw std::invalid_argument("training: trig time outside [0, pi/2]");
    Eigen::VectorXd eps = s.sigma_data * unit_noise.col(j);
    d.x_t.col(j) = std::cos(t(j)) * x0.col(j) + std::sin(t(j)) * eps;
    d.x_dot.col(j) = std::cos(t(j)) * eps - std::sin(t(j)) * x0.col(j);
  }
  d.target = d.x_dot;  // the velocity target coincides with the path derivative
  return d;
}

}  // namespace

ad::Var loss_trigflow_diffusion(ad::GradientTape& tape, const DenoiserModel& model,
                                const DenoiserModel::Bound& bound, const Tensor& x0,
                                const TrigSchedule& s, const Eigen::VectorXd& t,
                                const Tensor& unit_noise) {
  check_batch(x0, unit_noise);
  if (model.spec().head != Pred::kVTrig)
    throw std::invalid_argument("training: trig objective expects a trig-velocity head");
  TrigDraw d = trig_path(x0, s, t, unit_noise);
  ad::Var raw = model.forward(tape, bound, tape.constant(d.x_t / s.sigma_data), t, nullptr);
  ad::Var pred = s.sigma_data * raw;
  return weighted_mean_sq(pred - tape.constant(d.target), nullptr);
}

ad::Var loss_trigflow_diffusion(ad::GradientTape& tape, const DenoiserModel& model,
                                const DenoiserModel::Bound& bound, const Tensor& x0,
                                const TrigSchedule& s, std::uint64_t seed, std::uint64_t step) {
  Eigen::VectorXd t =
      rng::uniform_vector(x0.cols(), seed, rng::kTime, step) * s.t_hi();
  Tensor z = rng::normal_matrix(x0.rows(), x0.cols(), seed, rng::kLossNoise, step);
  return loss_trigflow_diffusion(tape, model, bound, x0, s, t, z);
}

Tensor trigflow_target_dfdt(const DenoiserModel& model, const Tensor& x0, const TrigSchedule& s,
                            const Eigen::VectorXd& t, const Tensor& unit_noise) {
  TrigDraw d = trig_path(x0, s, t, unit_noise);
  const double sd = s.sigma_data;
  auto [raw, raw_dot] =
      model.value_and_jvp(d.x_t / sd, t, d.x_dot / sd, 1.0, nullptr, /*use_ema=*/true);
  // f(x, t) = cos(t) x - sin(t) sigma raw(x / sigma, t); total derivative
  // along (x_dot, 1).
  Tensor dfdt(x0.rows(), x0.cols());
  for (Eigen::Index j = 0; j < x0.cols(); ++j) {
    double c = std::cos(t(j)), sn = std::sin(t(j));
    dfdt.col(j) = -sn * d.x_t.col(j) + c * d.x_dot.col(j) - c * sd * raw.col(j) -
                  sn * sd * raw_dot.col(j);
  }
  if (!dfdt.allFinite())
    throw std::runtime_error("training: non-finite time derivative in consistency target");
  return dfdt;
}

ad::Var trigflow_ct_surrogate(ad::GradientTape& tape, const DenoiserModel& model,
                              const DenoiserModel::Bound& bound, const Tensor& x0,
                              const TrigSchedule& s, const Eigen::VectorXd& t,
                              const Tensor& unit_noise, const Tensor& dfdt,
                              const std::function<double(double)>& lambda) {
  check_batch(x0, unit_noise);
  if (model.spec().head != Pred::kVTrig)
    throw std::invalid_argument("training: trig objective expects a trig-velocity head");
  TrigDraw d = trig_path(x0, s, t, unit_noise);
  ad::Var raw = model.forward(tape, bound, tape.constant(d.x_t / s.sigma_data), t, nullptr);
  ad::Var v = s.sigma_data * raw;
  Eigen::RowVectorXd coef(t.size());
  for (Eigen::Index j = 0; j < t.size(); ++j)
    coef(j) = -(lambda ? lambda(t(j)) : 1.0) * std::sin(t(j));
  ad::Var per_col = ad::colwise_sum(ad::cmul(v, tape.constant(dfdt)));
  return ad::mean_all(ad::colwise_scale(per_col, coef));
}

TrigCtGradient trigflow_ct_gradient(const DenoiserModel& model, const Tensor& x0,
                                    const TrigSchedule& s,
                                    const std::function<double(double)>& lambda,
                                    std::uint64_t seed, std::uint64_t step) {
  Eigen::VectorXd t =
      rng::uniform_vector(x0.cols(), seed, rng::kTime, step) * s.t_hi();
  Tensor z = rng::normal_matrix(x0.rows(), x0.cols(), seed, rng::kLossNoise, step);
  Tensor dfdt = trigflow_target_dfdt(model, x0, s, t, z);

  ad::GradientTape tape;
  DenoiserModel::Bound bound = model.bind(tape, /*trainable=*/true);
  ad::Var surrogate = trigflow_ct_surrogate(tape, model, bound, x0, s, t, z, dfdt, lambda);
  TrigCtGradient out;
  out.grads = compute_gradients(tape, surrogate, bound);
  out.surrogate = surrogate.scalar();
  return out;
}

// ---- optimizers ---------------------------------------------------------

Optimizer Optimizer::sgd(double lr, double momentum) {
  Optimizer o;
  o.kind_ = Kind::kSgd;
  o.lr_ = lr;
  o.momentum_ = momentum;
  return o;
}

Optimizer Optimizer::adam(double lr, double beta1, double beta2, double eps) {
  Optimizer o;
  o.kind_ = Kind::kAdam;
  o.lr_ = lr;
  o.beta1_ = beta1;
  o.beta2_ = beta2;
  o.eps_ = eps;
  return o;
}

void Optimizer::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("optimizer: parameter/gradient count mismatch");
  if (m_.empty()) {
    m_.reserve(params.size());
    for (const Tensor* p : params) m_.push_back(Tensor::Zero(p->rows(), p->cols()));
    if (kind_ == Kind::kAdam) v_ = m_;
  }
  ++t_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (kind_ == Kind::kSgd) {
      m_[i] = momentum_ * m_[i] + grads[i];
      *params[i] -= lr_ * m_[i];
    } else {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].array().square().matrix();
      double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
      double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
      params[i]->array() -=
          lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
    }
  }
}

// ---- training loop ------------------------------------------------------

namespace {

const VpDiscreteSchedule& need_vp(const TrainContext& ctx) {
  if (ctx.vp == nullptr) throw std::invalid_argument("training: objective needs a vp schedule");
  return *ctx.vp;
}

int ct_interval_at(const TrainConfig& cfg, int step) {
  if (cfg.ct_policy == "constant") return cfg.ct_interval;
  double progress = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 1.0;
  int gap = static_cast<int>(std::lround(cfg.ct_interval * (1.0 - progress)));
  return std::max(1, gap);
}

}  // namespace

TrainReport train(DenoiserModel& model, const DataFn& data, const TrainConfig& cfg,
                  const TrainContext& ctx) {
  cfg.validate();
  Optimizer opt = cfg.optimizer == "adam" ? Optimizer::adam(cfg.lr)
                                          : Optimizer::sgd(cfg.lr, cfg.momentum);
  TrainReport report;
  double running = 0.0;

  for (int step = 0; step < cfg.steps; ++step) {
    Tensor x0 = data(step, cfg.batch);
    Tensor cond;
    const Tensor* cond_ptr = nullptr;
    if (ctx.cond) {
      cond = ctx.cond(step, cfg.batch);
      if (cond.size() > 0 && cfg.cond_dropout > 0.0) {
        Eigen::VectorXd u = rng::uniform_vector(cond.cols(), cfg.seed, rng::kMisc, step);
        for (Eigen::Index j = 0; j < cond.cols(); ++j)
          if (u(j) < cfg.cond_dropout) cond.col(j).setZero();
      }
      if (cond.size() > 0) cond_ptr = &cond;
    }

    double loss_value = 0.0;
    if (cfg.objective == "trig-ct") {
      if (ctx.trig == nullptr)
        throw std::invalid_argument("training: objective needs a trig schedule");
      TrigCtGradient g = trigflow_ct_gradient(model, x0, *ctx.trig, nullptr, cfg.seed, step);
      loss_value = g.surrogate;
      if (!std::isfinite(loss_value)) {
        std::ostringstream msg;
        msg << "training: non-finite objective at step " << step << " (value " << loss_value
            << "); lower the learning rate or check the data scaling";
        throw std::runtime_error(msg.str());
      }
      opt.step(model.params(), g.grads);
    } else {
      ad::GradientTape tape;
      DenoiserModel::Bound bound = model.bind(tape, /*trainable=*/true);
      ad::Var loss;
      if (cfg.objective == "eps" || cfg.objective == "x0" || cfg.objective == "v") {
        Pred kind = cfg.objective == "eps"  ? Pred::kEps
                    : cfg.objective == "x0" ? Pred::kX0
                                            : Pred::kVDiff;
        loss = loss_diffusion(tape, model, bound, x0, cond_ptr, need_vp(ctx), kind, cfg.seed,
                              step);
      } else if (cfg.objective == "score") {
        const VpDiscreteSchedule& s = need_vp(ctx);
        auto w = make_weighting(cfg.weighting, s, static_cast<int>(x0.rows()),
                                cfg.weight_scale);
        loss = loss_score_matching(tape, model, bound, x0, s, w, cfg.seed, step);
      } else if (cfg.objective == "ct") {
        if (ctx.ve == nullptr)
          throw std::invalid_argument("training: objective needs a ve schedule");
        loss = loss_consistency_training(tape, model, bound, x0, *ctx.ve, cfg.ct_grid,
                                         ct_interval_at(cfg, step), cfg.seed, step,
                                         cfg.huber_c, cfg.lambda_ct);
      } else if (cfg.objective == "rf") {
        if (ctx.rf == nullptr)
          throw std::invalid_argument("training: objective needs an rf schedule");
        loss = loss_rectified_flow(tape, model, bound, x0, *ctx.rf, cfg.seed, step);
      } else if (cfg.objective == "trig") {
        if (ctx.trig == nullptr)
          throw std::invalid_argument("training: objective needs a trig schedule");
        loss = loss_trigflow_diffusion(tape, model, bound, x0, *ctx.trig, cfg.seed, step);
      } else {
        throw std::invalid_argument("training: unknown objective '" + cfg.objective + "'");
      }

      loss_value = loss.scalar();
      if (!std::isfinite(loss_value)) {
        std::ostringstream msg;
        msg << "training: non-finite objective at step " << step << " (value " << loss_value
            << "); lower the learning rate or check the data scaling";
        throw std::runtime_error(msg.str());
      }
      opt.step(model.params(), compute_gradients(tape, loss, bound));
    }

    model.ema_update();
    running = step == 0 ? loss_value : 0.98 * running + 0.02 * loss_value;
    if (step % std::max(1, cfg.log_every) == 0 || step == cfg.steps - 1) {
      report.step.push_back(step);
      report.loss.push_back(loss_value);
      report.smoothed.push_back(running);
    }
  }
  return report;
}

}  // namespace dlab
