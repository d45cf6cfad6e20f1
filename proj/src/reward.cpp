#include "dlab/reward.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "dlab/distillation.hpp"
#include "dlab/parameterizations.hpp"
#include "dlab/rng.hpp"

namespace dlab {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double noise_coef(const VpDiscreteSchedule& s, int t) {
  return t == 0 ? 0.0 : std::sqrt(s.one_minus_abar(t));
}

void require_differentiable(const RewardModel& reward, const char* what) {
  if (!reward.differentiable || !reward.grad)
    throw std::invalid_argument(std::string("reward: ") + what +
                                " needs a differentiable reward");
}

void check_taus(const std::vector<int>& taus, const VpDiscreteSchedule& s) {
  if (taus.size() < 2)
    throw std::invalid_argument("reward: sampler grid needs at least two points");
  for (std::size_t i = 0; i < taus.size(); ++i) {
    if (taus[i] < 0 || taus[i] > s.T)
      throw std::invalid_argument("reward: grid point outside the schedule");
    if (i > 0 && taus[i] <= taus[i - 1])
      throw std::invalid_argument("reward: grid must be strictly increasing");
  }
}

/// One deterministic reverse step cur -> prev at a shared time.
Tensor ddim_step(const Denoiser& den, const VpDiscreteSchedule& s, const Tensor& x, int cur,
                 int prev) {
  Eigen::VectorXd t = Eigen::VectorXd::Constant(x.cols(), static_cast<double>(cur));
  X0EpsPair p = to_x0_eps(Prediction{den.kind, den(x, t), x, t}, s, /*clamp=*/true);
  return s.a(prev) * p.x0 + noise_coef(s, prev) * p.eps;
}

/// -mean R(x) with the reward's own derivative spliced into the tape.
ad::Var neg_mean_reward(const ad::Var& x, const RewardModel& reward) {
  auto value = reward.value;
  auto grad = reward.grad;
  return ad::custom_scalar(
      x, [value](const Tensor& v) { return -value(v).mean(); },
      [grad](const Tensor& v) { return Tensor(-grad(v) / static_cast<double>(v.cols())); });
}

RewardGradient finish(ad::GradientTape& tape, const ad::Var& obj,
                      const DenoiserModel::Bound& bound, const RewardModel& reward,
                      const Tensor& final_x0) {
  RewardGradient out;
  out.grads = compute_gradients(tape, obj, bound);
  out.loss = obj.scalar();
  out.mean_reward = reward.value(final_x0).mean();
  return out;
}

}  // namespace

RewardModel reward_neg_sq_dist(const Eigen::VectorXd& target) {
  RewardModel r;
  r.name = "neg-sq-dist";
  r.differentiable = true;
  r.value = [target](const Tensor& x) {
    return Eigen::RowVectorXd(-(x.colwise() - target).colwise().squaredNorm());
  };
  r.grad = [target](const Tensor& x) { return Tensor(-2.0 * (x.colwise() - target)); };
  return r;
}

RewardModel reward_coordinate(int axis) {
  if (axis < 0) throw std::invalid_argument("reward: negative coordinate axis");
  RewardModel r;
  r.name = "coordinate";
  r.differentiable = true;
  r.value = [axis](const Tensor& x) {
    if (axis >= x.rows()) throw std::invalid_argument("reward: coordinate axis out of range");
    return Eigen::RowVectorXd(x.row(axis));
  };
  r.grad = [axis](const Tensor& x) {
    if (axis >= x.rows()) throw std::invalid_argument("reward: coordinate axis out of range");
    Tensor g = Tensor::Zero(x.rows(), x.cols());
    g.row(axis).setOnes();
    return g;
  };
  return r;
}

RewardModel reward_gmm_log_density(const GmmOracle& g, const VpDiscreteSchedule& s) {
  auto cache = std::make_shared<std::map<int, GmmOracle>>();
  auto diffused = [g, s, cache](int t) -> const GmmOracle& {
    auto it = cache->find(t);
    if (it == cache->end()) it = cache->emplace(t, diffused_gmm(g, s, t)).first;
    return it->second;
  };
  RewardModel r;
  r.name = "gmm-log-density";
  r.differentiable = true;
  r.value = [g](const Tensor& x) { return gmm_log_density(g, x); };
  r.grad = [g](const Tensor& x) { return gmm_score(g, x); };
  r.value_t = [diffused](const Tensor& x, int t) { return gmm_log_density(diffused(t), x); };
  r.grad_t = [diffused](const Tensor& x, int t) { return gmm_score(diffused(t), x); };
  return r;
}

RewardGradient refl_gradient(const DenoiserModel& model, const RewardModel& reward,
                             const VpDiscreteSchedule& s, const Tensor& x_cut, int t_cut,
                             const Tensor* cond) {
  require_differentiable(reward, "one-step reward backprop");
  if (t_cut < 1 || t_cut > s.T)
    throw std::invalid_argument("reward: cut time outside the schedule");
  ad::GradientTape tape;
  DenoiserModel::Bound bound = model.bind(tape, /*trainable=*/true);
  Eigen::VectorXd tvec = Eigen::VectorXd::Constant(x_cut.cols(), static_cast<double>(t_cut));
  TapedX0Eps p = taped_x0_eps(tape, model, bound, x_cut, tvec, cond, s);
  ad::Var obj = neg_mean_reward(p.x0, reward);
  return finish(tape, obj, bound, reward, p.x0.value());
}

RewardGradient refl_gradient(const DenoiserModel& model, const RewardModel& reward,
                             const VpDiscreteSchedule& s, const std::vector<int>& taus,
                             int batch, std::uint64_t seed, std::uint64_t step) {
  require_differentiable(reward, "one-step reward backprop");
  check_taus(taus, s);
  const int n_steps = static_cast<int>(taus.size()) - 1;
  rng::Stream st(seed, rng::kTime, step, 0);
  int cut = st.uniform_int(1, n_steps);  // grid position of the cut time, always > 0
  Denoiser den = as_denoiser(model);
  Tensor x = rng::normal_matrix(model.spec().data_dim, batch, seed, rng::kInit, step);
  for (int i = n_steps; i > cut; --i) x = ddim_step(den, s, x, taus[i], taus[i - 1]);
  return refl_gradient(model, reward, s, x, taus[cut], nullptr);
}

RewardGradient draft_k_gradient(const DenoiserModel& model, const RewardModel& reward,
                                const VpDiscreteSchedule& s, const std::vector<int>& taus,
                                int K, int batch, std::uint64_t seed, std::uint64_t step) {
  require_differentiable(reward, "truncated reward backprop");
  check_taus(taus, s);
  const int n_steps = static_cast<int>(taus.size()) - 1;
  if (K < 1 || K > n_steps)
    throw std::invalid_argument("reward: truncation depth exceeds the sampler steps");

  Denoiser den = as_denoiser(model);
  Tensor x = rng::normal_matrix(model.spec().data_dim, batch, seed, rng::kInit, step);
  for (int i = n_steps; i > K; --i) x = ddim_step(den, s, x, taus[i], taus[i - 1]);

  ad::GradientTape tape;
  DenoiserModel::Bound bound = model.bind(tape, /*trainable=*/true);
  ad::Var xv = tape.constant(x);
  for (int i = K; i >= 1; --i) {
    Eigen::VectorXd tvec = Eigen::VectorXd::Constant(batch, static_cast<double>(taus[i]));
    TapedX0Eps p = taped_x0_eps(tape, model, bound, xv, tvec, nullptr, s);
    xv = ad::scale(p.x0, s.a(taus[i - 1])) + ad::scale(p.eps, noise_coef(s, taus[i - 1]));
  }
  ad::Var obj = neg_mean_reward(xv, reward);
  return finish(tape, obj, bound, reward, xv.value());
}

ad::Var qsm_loss(ad::GradientTape& tape, const DenoiserModel& model,
                 const DenoiserModel::Bound& bound, const RewardModel& reward,
                 const VpDiscreteSchedule& s, const Tensor& x0, const Eigen::VectorXi& t,
                 const Tensor& noise) {
  if (!reward.has_diffused())
    throw std::invalid_argument("reward: score shaping needs the diffused reward pair");
  if (x0.cols() == 0) throw std::invalid_argument("reward: empty batch");
  if (x0.rows() != noise.rows() || x0.cols() != noise.cols())
    throw std::invalid_argument("reward: data/noise shape mismatch");

  const Eigen::Index n = x0.cols();
  Tensor x_t = x0, target(x0.rows(), n);
  Eigen::RowVectorXd a_over_omb(n), inv_omb(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (t(j) < 1 || t(j) > s.T) throw std::invalid_argument("reward: time index out of range");
    double a = s.a(t(j)), b = std::sqrt(s.one_minus_abar(t(j)));
    x_t.col(j) = a * x0.col(j) + b * noise.col(j);
    double omb = s.one_minus_abar(t(j));
    a_over_omb(j) = a / omb;
    inv_omb(j) = 1.0 / omb;
  }
  for (Eigen::Index j = 0; j < n; ++j) target.col(j) = reward.grad_t(x_t.col(j), t(j));

  TapedX0Eps p = taped_x0_eps(tape, model, bound, x_t, t.cast<double>(), nullptr, s);
  ad::Var score = ad::colwise_scale(p.x0, a_over_omb) -
                  ad::colwise_scale(tape.constant(x_t), inv_omb);
  return ad::mean_all(ad::colwise_squared_norm(score - tape.constant(target)));
}

ad::Var qsm_loss(ad::GradientTape& tape, const DenoiserModel& model,
                 const DenoiserModel::Bound& bound, const RewardModel& reward,
                 const VpDiscreteSchedule& s, const Tensor& x0, std::uint64_t seed,
                 std::uint64_t step) {
  Eigen::VectorXi t = rng::uniform_int_vector(x0.cols(), 1, s.T, seed, rng::kTime, step);
  Tensor noise = rng::normal_matrix(x0.rows(), x0.cols(), seed, rng::kLossNoise, step);
  return qsm_loss(tape, model, bound, reward, s, x0, t, noise);
}

RewardGradient ddpo_surrogate(const DenoiserModel& model, const RewardModel& reward,
                              const VpDiscreteSchedule& s, const Trajectory& traj,
                              bool mean_baseline) {
  if (!traj.probabilistic())
    throw std::invalid_argument("reward: sampler recorded no step densities");
  const Eigen::Index n = traj.final.cols();
  const double d = static_cast<double>(traj.final.rows());

  Eigen::RowVectorXd rewards = reward.value(traj.final);
  Eigen::RowVectorXd advantage = rewards;
  if (mean_baseline) advantage.array() -= rewards.mean();

  ad::GradientTape tape;
  DenoiserModel::Bound bound = model.bind(tape, /*trainable=*/true);
  ad::Var total;
  for (std::size_t i = 0; i + 1 < traj.times.size(); ++i) {
    int cur = static_cast<int>(std::lround(traj.times[i]));
    int prev = static_cast<int>(std::lround(traj.times[i + 1]));
    if (prev == 0) continue;  // deterministic tail step, no density
    double ab_c = s.abar(cur), ab_p = s.abar(prev);
    double sig = std::sqrt((1.0 - ab_p) / (1.0 - ab_c)) * std::sqrt(1.0 - ab_c / ab_p);
    if (sig <= 0.0) continue;
    double dir = std::sqrt(std::max(1.0 - ab_p - sig * sig, 0.0));

    Eigen::VectorXd tvec = Eigen::VectorXd::Constant(n, static_cast<double>(cur));
    TapedX0Eps p = taped_x0_eps(tape, model, bound, traj.states[i], tvec, nullptr, s);
    ad::Var mean = ad::scale(p.x0, std::sqrt(ab_p)) + ad::scale(p.eps, dir);
    ad::Var diff = tape.constant(traj.states[i + 1]) - mean;
    ad::Var lp = ad::add_scalar(ad::scale(ad::colwise_squared_norm(diff), -0.5 / (sig * sig)),
                                -0.5 * d * (kLog2Pi + 2.0 * std::log(sig)));
    total = total.valid() ? total + lp : lp;
  }
  if (!total.valid())
    throw std::invalid_argument("reward: trajectory has no stochastic transitions");

  ad::Var obj = ad::neg(ad::mean_all(ad::cmul(total, tape.constant(Tensor(advantage)))));
  RewardGradient out;
  out.grads = compute_gradients(tape, obj, bound);
  out.loss = obj.scalar();
  out.mean_reward = rewards.mean();
  return out;
}

RewardGradient ddpo_sf_update(const DenoiserModel& model, const RewardModel& reward,
                              const VpDiscreteSchedule& s, const std::vector<int>& taus,
                              int batch, bool mean_baseline, std::uint64_t seed,
                              std::uint64_t step) {
  check_taus(taus, s);
  SamplerConfig cfg;
  cfg.taus = taus;
  cfg.eta = 1.0;
  cfg.batch = batch;
  cfg.seed = rng::key(seed, rng::kMisc, step, 0);
  Trajectory traj = ddim_sample(as_denoiser(model), s, cfg);
  return ddpo_surrogate(model, reward, s, traj, mean_baseline);
}

Eigen::RowVectorXd drwr_weights(const Eigen::RowVectorXd& rewards, double beta, double w_max,
                                bool mean_baseline) {
  if (w_max <= 0.0) throw std::invalid_argument("reward: weight cap must be positive");
  Eigen::RowVectorXd advantage = rewards;
  if (mean_baseline) advantage.array() -= rewards.mean();
  return (beta * advantage.array()).exp().min(w_max).matrix();
}

ad::Var drwr_loss(ad::GradientTape& tape, const DenoiserModel& model,
                  const DenoiserModel::Bound& bound, const RewardModel& reward,
                  const VpDiscreteSchedule& s, const Tensor& x0, double beta, double w_max,
                  bool mean_baseline, const Eigen::VectorXi& t, const Tensor& noise) {
  if (model.spec().head != Pred::kEps)
    throw std::invalid_argument("reward: reweighted regression expects a noise-predicting head");
  if (x0.cols() == 0) throw std::invalid_argument("reward: empty batch");
  if (x0.rows() != noise.rows() || x0.cols() != noise.cols())
    throw std::invalid_argument("reward: data/noise shape mismatch");

  Eigen::RowVectorXd w = drwr_weights(reward.value(x0), beta, w_max, mean_baseline);
  const Eigen::Index n = x0.cols();
  Tensor x_t = x0;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (t(j) < 1 || t(j) > s.T) throw std::invalid_argument("reward: time index out of range");
    double a = s.a(t(j)), b = std::sqrt(s.one_minus_abar(t(j)));
    x_t.col(j) = a * x0.col(j) + b * noise.col(j);
  }
  ad::Var pred = model.forward(tape, bound, tape.constant(x_t), t.cast<double>(), nullptr);
  ad::Var per_col = ad::colwise_squared_norm(pred - tape.constant(noise));
  return ad::mean_all(ad::colwise_scale(per_col, w));
}

ad::Var drwr_loss(ad::GradientTape& tape, const DenoiserModel& model,
                  const DenoiserModel::Bound& bound, const RewardModel& reward,
                  const VpDiscreteSchedule& s, const Tensor& x0, double beta, double w_max,
                  bool mean_baseline, std::uint64_t seed, std::uint64_t step) {
  Eigen::VectorXi t = rng::uniform_int_vector(x0.cols(), 1, s.T, seed, rng::kTime, step);
  Tensor noise = rng::normal_matrix(x0.rows(), x0.cols(), seed, rng::kLossNoise, step);
  return drwr_loss(tape, model, bound, reward, s, x0, beta, w_max, mean_baseline, t, noise);
}

void FinetuneConfig::validate() const {
  if (method != "refl" && method != "draft" && method != "qsm" && method != "ddpo" &&
      method != "drwr")
    throw std::invalid_argument("finetune: unknown method '" + method + "'");
  if (steps < 0) throw std::invalid_argument("finetune: negative step count");
  if (batch < 1) throw std::invalid_argument("finetune: batch must be at least 1");
  if (lr <= 0.0) throw std::invalid_argument("finetune: learning rate must be positive");
  if (K < 1) throw std::invalid_argument("finetune: truncation depth must be at least 1");
  if (w_max <= 0.0) throw std::invalid_argument("finetune: weight cap must be positive");
  if (baseline != "none" && baseline != "mean")
    throw std::invalid_argument("finetune: unknown baseline '" + baseline + "'");
  if (log_every < 1) throw std::invalid_argument("finetune: log_every must be at least 1");
  bool rollout = method == "refl" || method == "draft" || method == "ddpo";
  if (rollout && taus.size() < 2)
    throw std::invalid_argument("finetune: rollout methods need a sampler grid");
  if (method == "ddpo" && sampler != "full")
    throw std::invalid_argument("finetune: the likelihood-free update needs the stochastic "
                                "sampler's step densities; sampler '" +
                                sampler + "' does not record them");
}

FinetuneReport finetune(DenoiserModel& model, const RewardModel& reward,
                        const VpDiscreteSchedule& s, const FinetuneConfig& cfg,
                        const DataFn& data) {
  cfg.validate();
  Optimizer opt = Optimizer::sgd(cfg.lr, cfg.momentum);
  std::vector<Tensor*> params = model.params();
  const bool mean_b = cfg.baseline == "mean";
  FinetuneReport rep;

  for (int it = 0; it < cfg.steps; ++it) {
    double loss = 0.0, mean_reward = 0.0;
    if (cfg.method == "refl" || cfg.method == "draft" || cfg.method == "ddpo") {
      RewardGradient g;
      if (cfg.method == "refl")
        g = refl_gradient(model, reward, s, cfg.taus, cfg.batch, cfg.seed, it);
      else if (cfg.method == "draft")
        g = draft_k_gradient(model, reward, s, cfg.taus, cfg.K, cfg.batch, cfg.seed, it);
      else
        g = ddpo_sf_update(model, reward, s, cfg.taus, cfg.batch, mean_b, cfg.seed, it);
      opt.step(params, g.grads);
      loss = g.loss;
      mean_reward = g.mean_reward;
    } else {
      if (!data) throw std::invalid_argument("finetune: method needs a data source");
      Tensor x0 = data(it, cfg.batch);
      ad::GradientTape tape;
      DenoiserModel::Bound bound = model.bind(tape, /*trainable=*/true);
      ad::Var obj = cfg.method == "qsm"
                        ? qsm_loss(tape, model, bound, reward, s, x0, cfg.seed, it)
                        : drwr_loss(tape, model, bound, reward, s, x0, cfg.beta, cfg.w_max,
                                    mean_b, cfg.seed, it);
      opt.step(params, compute_gradients(tape, obj, bound));
      loss = obj.scalar();
      mean_reward = reward.value(x0).mean();
    }
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "finetune: non-finite objective at step " << it << " (value " << loss
          << "); lower the learning rate or check the reward scaling";
      throw std::runtime_error(msg.str());
    }
    model.ema_update();
    rep.step.push_back(it);
    rep.mean_reward.push_back(mean_reward);
    rep.loss.push_back(loss);
  }
  return rep;
}

}  // namespace dlab
