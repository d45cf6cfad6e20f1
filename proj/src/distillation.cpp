#include "dlab/distillation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "dlab/parameterizations.hpp"
#include "dlab/rng.hpp"
#include "dlab/samplers.hpp"

namespace dlab {
namespace {

double noise_coef(const VpDiscreteSchedule& s, int t) {
  return t == 0 ? 0.0 : std::sqrt(s.one_minus_abar(t));
}

void check_grid(const std::vector<int>& grid, const VpDiscreteSchedule& s, int min_t) {
  if (grid.size() < 2)
    throw std::invalid_argument("distillation: grid needs at least two points");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] < min_t || grid[i] > s.T)
      throw std::invalid_argument("distillation: grid point outside the teacher's domain");
    if (i > 0 && grid[i] <= grid[i - 1])
      throw std::invalid_argument("distillation: grid must be strictly increasing");
  }
}

/// Guidance-merged clean/noise estimates at per-column times.
X0EpsPair predict_pair(const Denoiser& model, const VpDiscreteSchedule& s, const Tensor& x,
                       const Eigen::VectorXd& t, const Tensor* cond, double w) {
  if (model.kind == Pred::kVRf || model.kind == Pred::kVTrig)
    throw std::invalid_argument("distillation: teacher must predict in the diffusion frame");
  Tensor value = model(x, t, cond);
  if (w != 0.0) {
    if (model.cond_dim == 0)
      throw std::invalid_argument("distillation: guidance weight on an unconditional teacher");
    Tensor uncond = model(x, t, nullptr);
    value = value + w * (value - uncond);
  }
  return to_x0_eps(Prediction{model.kind, value, x, t}, s, /*clamp=*/true);
}

/// One deterministic reverse step with per-column times.
Tensor ddim_step_cols(const Denoiser& teacher, const VpDiscreteSchedule& s, const Tensor& x,
                      const Eigen::VectorXd& t_cur, const Eigen::VectorXd& t_prev,
                      const Tensor* cond, const Eigen::VectorXd* w) {
  Tensor value = teacher(x, t_cur, cond);
  if (w != nullptr) {
    if (teacher.cond_dim == 0)
      throw std::invalid_argument("distillation: guidance weight on an unconditional teacher");
    Tensor uncond = teacher(x, t_cur, nullptr);
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      value.col(j) += (*w)(j) * (value.col(j) - uncond.col(j));
  }
  X0EpsPair pair = to_x0_eps(Prediction{teacher.kind, value, x, t_cur}, s, /*clamp=*/true);
  Tensor out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    int tp = static_cast<int>(std::lround(t_prev(j)));
    out.col(j) = s.a(tp) * pair.x0.col(j) + noise_coef(s, tp) * pair.eps.col(j);
  }
  return out;
}

ad::Var pseudo_huber(const ad::Var& sq_norms, double c) {
  return ad::add_scalar(ad::sqrt_of(ad::add_scalar(sq_norms, c * c)), -c);
}

double stable_log1m_sigmoid(double logit) {
  // log(1 - sigmoid(l)) = -softplus(l)
  return -(std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit))));
}

}  // namespace

TapedX0Eps taped_x0_eps(ad::GradientTape& tape, const DenoiserModel& model,
                        const DenoiserModel::Bound& bound, const ad::Var& x_t,
                        const Eigen::VectorXd& t, const Tensor* cond,
                        const VpDiscreteSchedule& s) {
  ad::Var raw = model.forward(tape, bound, x_t, t, cond);
  const Eigen::Index n = x_t.value().cols();
  Eigen::RowVectorXd a(n), b(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    int tj = static_cast<int>(std::lround(t(j)));
    a(j) = s.a(tj);
    b(j) = std::sqrt(s.one_minus_abar(tj));
  }
  TapedX0Eps out;
  switch (model.spec().head) {
    case Pred::kEps:
      out.eps = raw;
      out.x0 = ad::colwise_scale(x_t, a.cwiseInverse()) -
               ad::colwise_scale(raw, b.cwiseQuotient(a));
      break;
    case Pred::kX0:
      out.x0 = raw;
      out.eps = ad::colwise_scale(x_t, b.cwiseInverse()) -
                ad::colwise_scale(raw, a.cwiseQuotient(b));
      break;
    case Pred::kVDiff:
      out.x0 = ad::colwise_scale(x_t, a) + ad::colwise_scale(raw, b);
      out.eps = ad::colwise_scale(x_t, b) - ad::colwise_scale(raw, a);
      break;
    default:
      throw std::invalid_argument("distillation: unsupported trainable head");
  }
  return out;
}

TapedX0Eps taped_x0_eps(ad::GradientTape& tape, const DenoiserModel& model,
                        const DenoiserModel::Bound& bound, const Tensor& x_t,
                        const Eigen::VectorXd& t, const Tensor* cond,
                        const VpDiscreteSchedule& s) {
  return taped_x0_eps(tape, model, bound, tape.constant(x_t), t, cond, s);
}

Tensor teacher_denoise(const Denoiser& teacher, const VpDiscreteSchedule& s, const Tensor& x,
                       int t_hi, int t_lo, const Tensor* cond, double w, int m) {
  if (t_lo < 0 || t_hi > s.T)
    throw std::invalid_argument("distillation: denoise times outside the schedule");
  if (m == 0) {
    if (t_lo != t_hi)
      throw std::invalid_argument("distillation: zero-step denoise requires equal times");
    return x;
  }
  if (m < 0) throw std::invalid_argument("distillation: negative step count");
  if (t_lo >= t_hi)
    throw std::invalid_argument("distillation: target time must precede the start time");

  std::vector<int> pts{t_hi};
  for (int k = 1; k <= m; ++k) {
    int g = t_hi + static_cast<int>(std::lround(static_cast<double>(t_lo - t_hi) * k / m));
    if (g < pts.back()) pts.push_back(g);
  }
  Tensor cur = x;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    Eigen::VectorXd tv = Eigen::VectorXd::Constant(x.cols(), pts[i]);
    X0EpsPair pair = predict_pair(teacher, s, cur, tv, cond, w);
    int tp = pts[i + 1];
    cur = s.a(tp) * pair.x0 + noise_coef(s, tp) * pair.eps;
  }
  return cur;
}

Denoiser lcm_denoiser(const DenoiserModel& student, const VpDiscreteSchedule& s, bool use_ema) {
  Denoiser den;
  den.kind = Pred::kX0;
  den.data_dim = student.spec().data_dim;
  den.cond_dim = student.spec().cond_dim;
  const double sd = student.spec().sigma_data;
  den.eval = [&student, &s, sd, use_ema](const Tensor& x, const Eigen::VectorXd& t,
                                         const Tensor* cond) {
    Tensor raw = student(x, t, cond, use_ema);
    X0EpsPair pair = to_x0_eps(Prediction{student.spec().head, raw, x, t}, s, /*clamp=*/true);
    HeadCoefs h = lcm_head_coefs(t, sd);
    Tensor out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      out.col(j) = h.c_skip(j) * x.col(j) + h.c_out(j) * pair.x0.col(j);
    return out;
  };
  return den;
}

ad::Var loss_consistency_distillation(ad::GradientTape& tape, const TeacherStudentPair& pair,
                                      const DenoiserModel::Bound& student_bound,
                                      const Tensor& x0, const VpDiscreteSchedule& s,
                                      const std::vector<int>& grid, int m,
                                      const Eigen::VectorXi& idx, const Tensor& noise,
                                      const Tensor* cond, double huber_c, double lambda) {
  if (pair.student == nullptr) throw std::invalid_argument("distillation: missing student");
  check_grid(grid, s, 0);
  if (m < 1 || m >= static_cast<int>(grid.size()))
    throw std::invalid_argument("distillation: denoise step count out of range");
  const Eigen::Index n = x0.cols();
  const double sd = pair.student->spec().sigma_data;

  Eigen::VectorXd t_hi(n), t_lo(n);
  Tensor x_hi(x0.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    int g = idx(j);
    if (g < 0 || g + m >= static_cast<int>(grid.size()))
      throw std::invalid_argument("distillation: grid index out of range");
    int hi = grid[g + m], lo = grid[g];
    t_hi(j) = hi;
    t_lo(j) = lo;
    x_hi.col(j) = s.a(hi) * x0.col(j) + noise_coef(s, hi) * noise.col(j);
  }

  // Teacher m-step targets, batched over samples sharing a (hi, lo) pair.
  Tensor xhat_lo(x0.rows(), n);
  std::map<std::pair<int, int>, std::vector<Eigen::Index>> groups;
  for (Eigen::Index j = 0; j < n; ++j)
    groups[{static_cast<int>(t_hi(j)), static_cast<int>(t_lo(j))}].push_back(j);
  for (const auto& [times, cols] : groups) {
    Tensor xg(x0.rows(), cols.size());
    Tensor cg;
    if (cond != nullptr && cond->size() > 0) cg.resize(cond->rows(), cols.size());
    for (std::size_t k = 0; k < cols.size(); ++k) {
      xg.col(k) = x_hi.col(cols[k]);
      if (cg.size() > 0) cg.col(k) = cond->col(cols[k]);
    }
    const Tensor* cgp = cg.size() > 0 ? &cg : nullptr;
    Tensor yg = teacher_denoise(pair.teacher, s, xg, times.first, times.second, cgp, pair.cfg_w, m);
    for (std::size_t k = 0; k < cols.size(); ++k) xhat_lo.col(cols[k]) = yg.col(k);
  }

  // Student map at the upper time (trainable) ...
  TapedX0Eps sp = taped_x0_eps(tape, *pair.student, student_bound, x_hi, t_hi, cond, s);
  HeadCoefs head_hi = lcm_head_coefs(t_hi, sd);
  ad::Var f = ad::colwise_scale(tape.constant(x_hi), head_hi.c_skip) +
              ad::colwise_scale(sp.x0, head_hi.c_out);

  // ... against the slow-weight map at the teacher's target.
  Tensor raw_ema = (*pair.student)(xhat_lo, t_lo, cond, /*use_ema=*/true);
  X0EpsPair ema_pair =
      to_x0_eps(Prediction{pair.student->spec().head, raw_ema, xhat_lo, t_lo}, s, true);
  HeadCoefs head_lo = lcm_head_coefs(t_lo, sd);
  Tensor f_tgt(x0.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j)
    f_tgt.col(j) = head_lo.c_skip(j) * xhat_lo.col(j) + head_lo.c_out(j) * ema_pair.x0.col(j);

  ad::Var dist = ad::colwise_squared_norm(f - tape.constant(f_tgt));
  if (huber_c > 0.0) dist = pseudo_huber(dist, huber_c);
  return ad::mean_all(lambda * dist);
}

ad::Var loss_consistency_distillation(ad::GradientTape& tape, const TeacherStudentPair& pair,
                                      const DenoiserModel::Bound& student_bound,
                                      const Tensor& x0, const VpDiscreteSchedule& s,
                                      const std::vector<int>& grid, int m, std::uint64_t seed,
                                      std::uint64_t step, const Tensor* cond, double huber_c,
                                      double lambda) {
  Eigen::VectorXi idx = rng::uniform_int_vector(
      x0.cols(), 0, static_cast<int>(grid.size()) - 1 - m, seed, rng::kTime, step);
  Tensor noise = rng::normal_matrix(x0.rows(), x0.cols(), seed, rng::kLossNoise, step);
  return loss_consistency_distillation(tape, pair, student_bound, x0, s, grid, m, idx, noise,
                                       cond, huber_c, lambda);
}

std::vector<double> run_consistency_distillation(const TeacherStudentPair& pair,
                                                 const DataFn& data,
                                                 const VpDiscreteSchedule& s,
                                                 const std::vector<int>& grid, int m,
                                                 double huber_c, const DistillLoopConfig& cfg) {
  Optimizer opt = Optimizer::sgd(cfg.lr, cfg.momentum);
  std::vector<double> losses;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor x0 = data(step, cfg.batch);
    ad::GradientTape tape;
    DenoiserModel::Bound bound = pair.student->bind(tape, /*trainable=*/true);
    ad::Var loss = loss_consistency_distillation(tape, pair, bound, x0, s, grid, m, cfg.seed,
                                                 step, nullptr, huber_c);
    double value = loss.scalar();
    if (!std::isfinite(value))
      throw std::runtime_error("distillation: non-finite consistency loss");
    opt.step(pair.student->params(), compute_gradients(tape, loss, bound));
    pair.student->ema_update();
    if (step % std::max(1, cfg.log_every) == 0 || step == cfg.steps - 1)
      losses.push_back(value);
  }
  return losses;
}

ad::Var loss_progressive_distillation(ad::GradientTape& tape, const DenoiserModel& student,
                                      const DenoiserModel::Bound& bound,
                                      const Denoiser& teacher, const VpDiscreteSchedule& s,
                                      const Tensor& x0, const std::vector<int>& teacher_grid,
                                      const Eigen::VectorXi& iv, const Tensor& noise,
                                      const Tensor* cond, const Eigen::VectorXd* w) {
  check_grid(teacher_grid, s, 0);
  if ((teacher_grid.size() - 1) % 2 != 0)
    throw std::invalid_argument("distillation: teacher grid must have an even interval count");
  const int n_student = (static_cast<int>(teacher_grid.size()) - 1) / 2;
  const Eigen::Index n = x0.cols();

  Eigen::VectorXd t_cur(n), t_mid(n), t_prev(n);
  Tensor x_t(x0.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (iv(j) < 1 || iv(j) > n_student)
      throw std::invalid_argument("distillation: interval index outside the student grid");
    t_cur(j) = teacher_grid[2 * iv(j)];
    t_mid(j) = teacher_grid[2 * iv(j) - 1];
    t_prev(j) = teacher_grid[2 * iv(j) - 2];
    int tc = static_cast<int>(t_cur(j));
    x_t.col(j) = s.a(tc) * x0.col(j) + noise_coef(s, tc) * noise.col(j);
  }

  Tensor x_mid = ddim_step_cols(teacher, s, x_t, t_cur, t_mid, cond, w);
  Tensor x_tgt = ddim_step_cols(teacher, s, x_mid, t_mid, t_prev, cond, w);

  Tensor scond;
  const Tensor* scp = cond;
  if (w != nullptr) {
    // the drawn guidance weight becomes an extra condition row
    scond.resize((cond != nullptr ? cond->rows() : 0) + 1, n);
    if (cond != nullptr) scond.topRows(cond->rows()) = *cond;
    scond.bottomRows(1) = w->transpose();
    scp = &scond;
  }
  TapedX0Eps sp = taped_x0_eps(tape, student, bound, x_t, t_cur, scp, s);
  Eigen::RowVectorXd a_prev(n), nc_prev(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    int tp = static_cast<int>(t_prev(j));
    a_prev(j) = s.a(tp);
    nc_prev(j) = noise_coef(s, tp);
  }
  ad::Var x_hat = ad::colwise_scale(sp.x0, a_prev) + ad::colwise_scale(sp.eps, nc_prev);
  return ad::mean_all(ad::colwise_squared_norm(x_hat - tape.constant(x_tgt)));
}

PdRound progressive_distill_round(const Denoiser& teacher, DenoiserModel& student,
                                  const std::vector<int>& teacher_grid,
                                  const VpDiscreteSchedule& s, const DataFn& data,
                                  const PdConfig& cfg, const DataFn& cond) {
  check_grid(teacher_grid, s, 0);
  if ((teacher_grid.size() - 1) % 2 != 0)
    throw std::invalid_argument("distillation: teacher grid must have an even interval count");
  const int n_student = (static_cast<int>(teacher_grid.size()) - 1) / 2;

  PdRound round;
  for (int i = 0; i <= n_student; ++i) round.grid.push_back(teacher_grid[2 * i]);

  Optimizer opt = Optimizer::sgd(cfg.loop.lr, cfg.loop.momentum);
  for (int step = 0; step < cfg.loop.steps; ++step) {
    Tensor x0 = data(step, cfg.loop.batch);
    const Eigen::Index n = x0.cols();
    Tensor c;
    if (cond) c = cond(step, cfg.loop.batch);
    const Tensor* cp = c.size() > 0 ? &c : nullptr;

    Eigen::VectorXi iv =
        rng::uniform_int_vector(n, 1, n_student, cfg.loop.seed, rng::kTime, step);
    Tensor noise = rng::normal_matrix(x0.rows(), n, cfg.loop.seed, rng::kLossNoise, step);

    Eigen::VectorXd wv;
    const Eigen::VectorXd* wp = nullptr;
    if (cfg.guided) {
      wv = cfg.w_lo +
           (cfg.w_hi - cfg.w_lo) *
               rng::uniform_vector(n, cfg.loop.seed, rng::kMisc, step).array();
      wp = &wv;
    }

    ad::GradientTape tape;
    DenoiserModel::Bound bound = student.bind(tape, /*trainable=*/true);
    ad::Var loss = loss_progressive_distillation(tape, student, bound, teacher, s, x0,
                                                 teacher_grid, iv, noise, cp, wp);
    double value = loss.scalar();
    if (!std::isfinite(value))
      throw std::runtime_error("distillation: non-finite halving loss");
    opt.step(student.params(), compute_gradients(tape, loss, bound));
    student.ema_update();
    if (step % std::max(1, cfg.loop.log_every) == 0 || step == cfg.loop.steps - 1)
      round.loss.push_back(value);
  }
  return round;
}

// ---- score-distillation generators ---------------------------------------

namespace {

void check_sds_band(const Eigen::VectorXi& t, int T) {
  int lo = std::max(1, static_cast<int>(std::ceil(0.02 * T)));
  int hi = static_cast<int>(std::floor(0.98 * T));
  for (Eigen::Index j = 0; j < t.size(); ++j)
    if (t(j) < lo || t(j) > hi)
      throw std::invalid_argument("distillation: time outside the clipped band");
}

/// Shared scaffold: taped generator output, diffused copy, and the surrogate
/// mean residual^T output whose gradient is the method's update direction.
GeneratorGradient generator_gradient(const DenoiserModel& generator, const Tensor& latents,
                                     const Tensor* cond, const Eigen::VectorXi& t,
                                     const Tensor& noise, const VpDiscreteSchedule& s,
                                     const std::function<Tensor(const Tensor& x_t)>& residual) {
  const Eigen::Index n = latents.cols();
  ad::GradientTape tape;
  DenoiserModel::Bound bound = generator.bind(tape, /*trainable=*/true);
  const Tensor* gcond = generator.spec().cond_dim > 0 ? cond : nullptr;
  ad::Var xg = generator.forward(tape, bound, tape.constant(latents),
                                 Eigen::VectorXd::Zero(n), gcond);
  Tensor x_t(xg.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j)
    x_t.col(j) = s.a(t(j)) * xg.value().col(j) + std::sqrt(s.one_minus_abar(t(j))) * noise.col(j);

  ad::Var surrogate =
      ad::scale(ad::sum_all(ad::cmul(tape.constant(residual(x_t)), xg)), 1.0 / n);
  GeneratorGradient out;
  out.grads = compute_gradients(tape, surrogate, bound);
  out.surrogate = surrogate.scalar();
  return out;
}

}  // namespace

GeneratorGradient sds_gradient(const DenoiserModel& generator, const Tensor& latents,
                               const Denoiser& teacher, const VpDiscreteSchedule& s,
                               const Tensor* cond, double guidance_w,
                               const std::function<double(int)>& w_fn, const Eigen::VectorXi& t,
                               const Tensor& noise) {
  check_sds_band(t, s.T);
  return generator_gradient(generator, latents, cond, t, noise, s, [&](const Tensor& x_t) {
    X0EpsPair pair = predict_pair(teacher, s, x_t, t.cast<double>(), cond, guidance_w);
    Tensor resid(x_t.rows(), x_t.cols());
    for (Eigen::Index j = 0; j < x_t.cols(); ++j)
      resid.col(j) = w_fn(t(j)) * (pair.eps.col(j) - noise.col(j));
    return resid;
  });
}

GeneratorGradient sds_gradient(const DenoiserModel& generator, const Tensor& latents,
                               const Denoiser& teacher, const VpDiscreteSchedule& s,
                               const Tensor* cond, double guidance_w,
                               const std::function<double(int)>& w_fn, std::uint64_t seed,
                               std::uint64_t step) {
  int lo = std::max(1, static_cast<int>(std::ceil(0.02 * s.T)));
  int hi = static_cast<int>(std::floor(0.98 * s.T));
  Eigen::VectorXi t = rng::uniform_int_vector(latents.cols(), lo, hi, seed, rng::kTime, step);
  Tensor noise = rng::normal_matrix(generator.spec().out_dim(), latents.cols(), seed,
                                    rng::kLossNoise, step);
  return sds_gradient(generator, latents, teacher, s, cond, guidance_w, w_fn, t, noise);
}

GeneratorGradient vsd_gradient(const DenoiserModel& generator, const Tensor& latents,
                               const ScoreFn& real_score, const DenoiserModel& fake_model,
                               const VpDiscreteSchedule& s,
                               const std::function<double(int)>& w_fn, const Eigen::VectorXi& t,
                               const Tensor& noise) {
  if (&fake_model == &generator)
    throw std::invalid_argument(
        "distillation: distribution model must not share parameters with the generator");
  if (fake_model.spec().head != Pred::kEps)
    throw std::invalid_argument("distillation: distribution model must predict noise");
  return generator_gradient(generator, latents, nullptr, t, noise, s, [&](const Tensor& x_t) {
    Eigen::VectorXd tv = t.cast<double>();
    Tensor s_fake = score_from_prediction(
        Prediction{Pred::kEps, fake_model(x_t, tv), x_t, tv}, s, Pred::kEps, true);
    Tensor s_real = real_score(x_t, t);
    Tensor resid(x_t.rows(), x_t.cols());
    for (Eigen::Index j = 0; j < x_t.cols(); ++j)
      resid.col(j) = w_fn(t(j)) * (s_fake.col(j) - s_real.col(j));
    return resid;
  });
}

GeneratorGradient vsd_gradient(const DenoiserModel& generator, const Tensor& latents,
                               const ScoreFn& real_score, const DenoiserModel& fake_model,
                               const VpDiscreteSchedule& s,
                               const std::function<double(int)>& w_fn, std::uint64_t seed,
                               std::uint64_t step) {
  Eigen::VectorXi t = rng::uniform_int_vector(latents.cols(), 1, s.T, seed, rng::kTime, step);
  Tensor noise = rng::normal_matrix(generator.spec().out_dim(), latents.cols(), seed,
                                    rng::kLossNoise, step);
  return vsd_gradient(generator, latents, real_score, fake_model, s, w_fn, t, noise);
}

// ---- distribution-matching distillation -----------------------------------

DmdState make_dmd_state(const DenoiserModel& teacher, std::uint64_t seed) {
  if (teacher.spec().head != Pred::kEps)
    throw std::invalid_argument("distillation: teacher for this method must predict noise");
  DmdState st;
  ModelSpec gen_spec = teacher.spec();
  gen_spec.head = Pred::kX0;
  gen_spec.init_seed = rng::mix(seed);
  st.generator = DenoiserModel(gen_spec);
  st.fake_score = teacher;  // trainable copy; the real teacher stays frozen
  int width = teacher.spec().hidden.empty() ? teacher.spec().in_dim()
                                            : teacher.spec().hidden.back();
  st.disc_w = rng::normal_matrix(1, width, seed, rng::kParamInit, 101) /
              std::sqrt(static_cast<double>(width));
  st.disc_b = Tensor::Zero(1, 1);
  return st;
}

DmdGrads dmd_update(const DmdState& st, const Denoiser& teacher, const VpDiscreteSchedule& s,
                    const Tensor& real_x0, std::uint64_t seed, std::uint64_t step) {
  if (st.tau.empty()) throw std::invalid_argument("distillation: empty student grid");
  for (int t : st.tau)
    if (t < 1 || t > s.T)
      throw std::invalid_argument("distillation: student grid outside the teacher's domain");
  if (st.teacher_lo < 1 || st.teacher_hi > s.T || st.teacher_lo > st.teacher_hi)
    throw std::invalid_argument("distillation: teacher time range invalid");

  const Eigen::Index n = real_x0.cols();
  const Eigen::Index d = real_x0.rows();
  const std::uint64_t base = step * 8;
  DmdGrads out;

  // Generator objective: weighted clean-estimate gap plus adversarial term.
  Eigen::VectorXi ti = rng::uniform_int_vector(n, 0, static_cast<int>(st.tau.size()) - 1, seed,
                                               rng::kTime, base + 0);
  Tensor z = rng::normal_matrix(d, n, seed, rng::kLossNoise, base + 1);
  Eigen::VectorXd tau_t(n);
  Tensor x_tau(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    int tj = st.tau[ti(j)];
    tau_t(j) = tj;
    x_tau.col(j) = s.a(tj) * real_x0.col(j) + std::sqrt(s.one_minus_abar(tj)) * z.col(j);
  }

  ad::GradientTape tape;
  DenoiserModel::Bound gb = st.generator.bind(tape, /*trainable=*/true);
  ad::Var xf = st.generator.forward(tape, gb, tape.constant(x_tau), tau_t);
  Tensor Xf = xf.value();

  Eigen::VectorXi t2 =
      rng::uniform_int_vector(n, st.teacher_lo, st.teacher_hi, seed, rng::kTime, base + 2);
  Tensor e2 = rng::normal_matrix(d, n, seed, rng::kLossNoise, base + 3);
  Eigen::VectorXd t2d = t2.cast<double>();
  Tensor xft(d, n);
  for (Eigen::Index j = 0; j < n; ++j)
    xft.col(j) = s.a(t2(j)) * Xf.col(j) + std::sqrt(s.one_minus_abar(t2(j))) * e2.col(j);

  X0EpsPair real_pred = predict_pair(teacher, s, xft, t2d, nullptr, 0.0);
  X0EpsPair fake_pred =
      to_x0_eps(Prediction{Pred::kEps, st.fake_score(xft, t2d), xft, t2d}, s, true);

  Eigen::RowVectorXd coef(n);
  double weight_sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double gap = std::max((Xf.col(j) - real_pred.x0.col(j)).lpNorm<1>(), 1e-12);
    double omb = s.one_minus_abar(t2(j));
    double w = (2.0 * omb / s.a(t2(j))) * static_cast<double>(d) / gap;
    weight_sum += w;
    coef(j) = 0.5 * st.lambda_dm * w * s.a(t2(j)) / omb;
  }
  Tensor target = Xf - (fake_pred.x0 - real_pred.x0);
  ad::Var loss_dm = ad::mean_all(
      ad::colwise_scale(ad::colwise_squared_norm(xf - tape.constant(target)), coef));

  Eigen::VectorXi tg =
      rng::uniform_int_vector(n, st.teacher_lo, st.teacher_hi, seed, rng::kTime, base + 4);
  Tensor eg = rng::normal_matrix(d, n, seed, rng::kLossNoise, base + 5);
  Eigen::RowVectorXd ag(n);
  Tensor bg_eg(d, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    ag(j) = s.a(tg(j));
    bg_eg.col(j) = std::sqrt(s.one_minus_abar(tg(j))) * eg.col(j);
  }
  ad::Var x_adv = ad::colwise_scale(xf, ag) + tape.constant(bg_eg);
  DenoiserModel::Bound fb = st.fake_score.bind(tape, /*trainable=*/false);
  ad::Var feat = st.fake_score.forward_features(tape, fb, x_adv, tg.cast<double>());
  ad::Var logit = ad::add_scalar(ad::matmul(tape.constant(st.disc_w), feat), st.disc_b(0, 0));
  ad::Var loss_adv = ad::mean_all(ad::neg(ad::log_sigmoid(logit)));

  ad::Var gen_obj = loss_dm + st.lambda_adv * loss_adv;
  out.generator = compute_gradients(tape, gen_obj, gb);
  out.diag.loss_dm = loss_dm.scalar();
  out.diag.loss_adv_gen = loss_adv.scalar();
  out.diag.weight_mean = weight_sum / n;

  // Distribution model: plain denoising loss on detached generator samples.
  {
    ad::GradientTape ft;
    DenoiserModel::Bound fbt = st.fake_score.bind(ft, /*trainable=*/true);
    ad::Var lf = loss_diffusion(ft, st.fake_score, fbt, Xf, nullptr, s, Pred::kEps, seed,
                                base + 6);
    out.fake = compute_gradients(ft, lf, fbt);
    out.diag.loss_fake = lf.scalar();
  }

  // Discriminator head on the (frozen-here) fake trunk.
  {
    ad::GradientTape dt;
    Eigen::VectorXi td =
        rng::uniform_int_vector(n, st.teacher_lo, st.teacher_hi, seed, rng::kTime, base + 7);
    Tensor er = rng::normal_matrix(d, n, seed, rng::kLossNoise, base + 7);
    Tensor ef = rng::normal_matrix(d, n, seed, rng::kMisc, base + 7);
    Eigen::VectorXd tdd = td.cast<double>();
    Tensor xr(d, n), xk(d, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      double a = s.a(td(j)), b = std::sqrt(s.one_minus_abar(td(j)));
      xr.col(j) = a * real_x0.col(j) + b * er.col(j);
      xk.col(j) = a * Xf.col(j) + b * ef.col(j);
    }
    DenoiserModel::Bound fbd = st.fake_score.bind(dt, /*trainable=*/false);
    ad::Var wd = dt.leaf(st.disc_w, true);
    ad::Var bd = dt.leaf(st.disc_b, true);
    ad::Var fr = st.fake_score.forward_features(dt, fbd, dt.constant(xr), tdd);
    ad::Var fk = st.fake_score.forward_features(dt, fbd, dt.constant(xk), tdd);
    ad::Var logit_r = ad::add_colvec(ad::matmul(wd, fr), bd);
    ad::Var logit_f = ad::add_colvec(ad::matmul(wd, fk), bd);
    ad::Var loss_disc = ad::mean_all(ad::neg(ad::log_sigmoid(logit_r))) +
                        ad::mean_all(ad::neg(ad::log_sigmoid(ad::neg(logit_f))));
    std::vector<Tensor> dg = ad::compute_gradients(dt, loss_disc, {wd, bd});
    out.disc_w = dg[0];
    out.disc_b = dg[1];
    out.diag.loss_disc = loss_disc.scalar();
  }
  return out;
}

std::vector<DmdDiagnostics> run_dmd(DmdState& st, const Denoiser& teacher,
                                    const VpDiscreteSchedule& s, const DataFn& data,
                                    const DistillLoopConfig& cfg) {
  Optimizer gen_opt = Optimizer::sgd(cfg.lr, cfg.momentum);
  Optimizer fake_opt = Optimizer::sgd(cfg.lr, cfg.momentum);
  Optimizer disc_opt = Optimizer::sgd(cfg.lr, cfg.momentum);
  std::vector<DmdDiagnostics> history;
  history.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor x0 = data(step, cfg.batch);
    DmdGrads g = dmd_update(st, teacher, s, x0, cfg.seed, step);
    if (!std::isfinite(g.diag.loss_dm) || !std::isfinite(g.diag.loss_fake) ||
        !std::isfinite(g.diag.loss_disc))
      throw std::runtime_error("distillation: non-finite distribution-matching loss");
    gen_opt.step(st.generator.params(), g.generator);
    fake_opt.step(st.fake_score.params(), g.fake);
    disc_opt.step({&st.disc_w, &st.disc_b}, {g.disc_w, g.disc_b});
    st.generator.ema_update();
    st.fake_score.ema_update();
    history.push_back(g.diag);
  }
  return history;
}

Tensor dmd_sample(const DenoiserModel& generator, const VpDiscreteSchedule& s,
                  const std::vector<int>& tau_desc, int n, std::uint64_t seed,
                  int base_index) {
  if (generator.spec().head != Pred::kX0)
    throw std::invalid_argument("distillation: few-step generator must predict clean samples");
  if (tau_desc.empty()) throw std::invalid_argument("distillation: empty sampling grid");
  for (std::size_t i = 0; i < tau_desc.size(); ++i) {
    if (tau_desc[i] < 1 || tau_desc[i] > s.T)
      throw std::invalid_argument("distillation: sampling grid outside the schedule");
    if (i > 0 && tau_desc[i] >= tau_desc[i - 1])
      throw std::invalid_argument("distillation: sampling grid must be strictly decreasing");
  }
  const int d = generator.spec().data_dim;
  Tensor x = rng::normal_matrix(d, n, seed, rng::kInit, 0, base_index);
  Tensor x0;
  for (std::size_t i = 0; i < tau_desc.size(); ++i) {
    x0 = generator(x, Eigen::VectorXd::Constant(n, tau_desc[i]));
    if (i + 1 < tau_desc.size()) {
      int tn = tau_desc[i + 1];
      Tensor zn = rng::normal_matrix(d, n, seed, rng::kStepNoise, tn, base_index);
      x = s.a(tn) * x0 + std::sqrt(s.one_minus_abar(tn)) * zn;
    }
  }
  return x0;
}

// ---- adversarial distillation ---------------------------------------------

AddStudentLosses add_losses(ad::GradientTape& tape, const DenoiserModel& student,
                            const DenoiserModel::Bound& student_bound, const Denoiser& teacher,
                            const DenoiserModel& disc, const VpDiscreteSchedule& s,
                            const Tensor& x0, const std::vector<int>& grid, double lambda,
                            const Eigen::VectorXi& grid_idx, const Tensor& noise_s,
                            const Eigen::VectorXi& t_teacher, const Tensor& noise_t,
                            double huber_c) {
  check_grid(grid, s, 1);
  const Eigen::Index n = x0.cols();
  Eigen::VectorXd ts(n);
  Tensor x_s(x0.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (grid_idx(j) < 0 || grid_idx(j) >= static_cast<int>(grid.size()))
      throw std::invalid_argument("distillation: grid index out of range");
    int tj = grid[grid_idx(j)];
    ts(j) = tj;
    x_s.col(j) = s.a(tj) * x0.col(j) + std::sqrt(s.one_minus_abar(tj)) * noise_s.col(j);
  }

  TapedX0Eps sp = taped_x0_eps(tape, student, student_bound, x_s, ts, nullptr, s);
  ad::Var xhat = sp.x0;

  // Adversarial part, exactly in the printed orientation: the student
  // minimizes log D(own estimate) + log(1 - D(data)).
  DenoiserModel::Bound db = disc.bind(tape, /*trainable=*/false);
  ad::Var logit_fake = disc.forward(tape, db, xhat, Eigen::VectorXd::Zero(n));
  Tensor logit_real = disc(x0, Eigen::VectorXd::Zero(n));
  double real_term = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) real_term += stable_log1m_sigmoid(logit_real(0, j));
  real_term /= static_cast<double>(n);
  ad::Var adv = ad::add_scalar(ad::mean_all(ad::log_sigmoid(logit_fake)), real_term);

  // Teacher matching on a rediffusion of the detached student estimate.
  Tensor xhat_plain = xhat.value();
  Tensor x_t(x0.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (t_teacher(j) < 1 || t_teacher(j) > s.T)
      throw std::invalid_argument("distillation: teacher time out of range");
    x_t.col(j) = s.a(t_teacher(j)) * xhat_plain.col(j) +
                 std::sqrt(s.one_minus_abar(t_teacher(j))) * noise_t.col(j);
  }
  X0EpsPair tp = predict_pair(teacher, s, x_t, t_teacher.cast<double>(), nullptr, 0.0);
  ad::Var dist = ad::colwise_squared_norm(xhat - tape.constant(tp.x0));
  if (huber_c > 0.0) dist = pseudo_huber(dist, huber_c);
  ad::Var distill = ad::mean_all(dist);

  AddStudentLosses out;
  out.adversarial = adv;
  out.distill = distill;
  out.total = adv + lambda * distill;
  return out;
}

AddStudentLosses add_losses(ad::GradientTape& tape, const DenoiserModel& student,
                            const DenoiserModel::Bound& student_bound, const Denoiser& teacher,
                            const DenoiserModel& disc, const VpDiscreteSchedule& s,
                            const Tensor& x0, const std::vector<int>& grid, double lambda,
                            std::uint64_t seed, std::uint64_t step, double huber_c) {
  const Eigen::Index n = x0.cols();
  Eigen::VectorXi gi = rng::uniform_int_vector(n, 0, static_cast<int>(grid.size()) - 1, seed,
                                               rng::kTime, 2 * step);
  Tensor ns = rng::normal_matrix(x0.rows(), n, seed, rng::kLossNoise, 2 * step);
  Eigen::VectorXi tt = rng::uniform_int_vector(n, 1, s.T, seed, rng::kTime, 2 * step + 1);
  Tensor nt = rng::normal_matrix(x0.rows(), n, seed, rng::kLossNoise, 2 * step + 1);
  return add_losses(tape, student, student_bound, teacher, disc, s, x0, grid, lambda, gi, ns,
                    tt, nt, huber_c);
}

ad::Var add_disc_objective(ad::GradientTape& tape, const DenoiserModel& disc,
                           const DenoiserModel::Bound& disc_bound, const Tensor& student_x0hat,
                           const Tensor& real_x0) {
  Eigen::VectorXd zeros = Eigen::VectorXd::Zero(student_x0hat.cols());
  ad::Var logit_fake =
      disc.forward(tape, disc_bound, tape.constant(student_x0hat), zeros);
  ad::Var logit_real = disc.forward(tape, disc_bound, tape.constant(real_x0), zeros);
  return ad::mean_all(ad::log_sigmoid(logit_fake)) +
         ad::mean_all(ad::log_sigmoid(ad::neg(logit_real)));
}

// ---- rectified-flow distillation -------------------------------------------

std::pair<Tensor, Tensor> rf_teacher_pairs(const Denoiser& teacher, const VpDiscreteSchedule& s,
                                           const std::vector<int>& taus, double eta, int n,
                                           std::uint64_t seed, int base_index) {
  if (eta != 0.0)
    throw std::invalid_argument("distillation: pair generation needs the deterministic sampler");
  SamplerConfig cfg;
  cfg.taus = taus;
  cfg.eta = 0.0;
  cfg.seed = seed;
  cfg.batch = n;
  cfg.base_index = base_index;
  Trajectory traj = ddim_sample(teacher, s, cfg);
  Tensor eps =
      rng::normal_matrix(traj.final.rows(), n, seed, rng::kInit, 0, base_index);
  return {eps, traj.final};
}

ad::Var rf_mapped_velocity_loss(ad::GradientTape& tape, const DenoiserModel& student,
                                const DenoiserModel::Bound& bound, const Tensor& eps,
                                const Tensor& x0_pair, const VpDiscreteSchedule& s,
                                const Eigen::VectorXi& t) {
  if (student.spec().head != Pred::kEps)
    throw std::invalid_argument("distillation: mapped-velocity loss expects a noise head");
  const Eigen::Index n = eps.cols();
  Tensor x_t(eps.rows(), n), target(eps.rows(), n), drift(eps.rows(), n);
  Eigen::RowVectorXd head_coef(n);
  Eigen::VectorXd tv = t.cast<double>();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (t(j) < 1 || t(j) > s.T)
      throw std::invalid_argument("distillation: time index out of range");
    double a = s.a(t(j)), b = std::sqrt(s.one_minus_abar(t(j)));
    double beta = a + b;
    x_t.col(j) = a * x0_pair.col(j) + b * eps.col(j);
    target.col(j) = (x0_pair.col(j) - eps.col(j)) / (1.0 + 2.0 * a * b);
    // Mapped velocity of v_x = b * x0_hat - a * eps with the pair's own noise
    // in the second slot; folding in x0_hat = (x_t - b eps_hat) / a gives
    //   v_y = x_t/(a beta^2) - (a/beta) eps - (b^2/(a beta)) eps_hat.
    drift.col(j) = x_t.col(j) / (a * beta * beta) - (a / beta) * eps.col(j);
    head_coef(j) = b * b / (a * beta);
  }
  ad::Var eps_hat = student.forward(tape, bound, tape.constant(x_t), tv, nullptr);
  ad::Var v_y = tape.constant(drift) - ad::colwise_scale(eps_hat, head_coef);
  return ad::mean_all(ad::colwise_squared_norm(v_y - tape.constant(target)));
}

ad::Var rf_distill_loss(ad::GradientTape& tape, const DenoiserModel& student,
                        const DenoiserModel::Bound& bound, int approach, const Tensor& eps,
                        const Tensor& x0_pair, const VpDiscreteSchedule& vp,
                        const RfSchedule& rf, std::uint64_t seed, std::uint64_t step) {
  const Eigen::Index n = eps.cols();
  if (approach == 1) {
    Eigen::VectorXd t01 = rng::uniform_vector(n, seed, rng::kTime, step);
    return loss_rectified_flow(tape, student, bound, x0_pair, eps, rf, t01);
  }
  if (approach == 2) {
    Eigen::VectorXi t = rng::uniform_int_vector(n, 1, vp.T, seed, rng::kTime, step);
    return rf_mapped_velocity_loss(tape, student, bound, eps, x0_pair, vp, t);
  }
  throw std::invalid_argument("distillation: unknown rectified-flow approach");
}

}  // namespace dlab
