#include "dlab/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dlab {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

const Tensor* cond_ptr(const SamplerConfig& cfg) {
  return cfg.cond.size() > 0 ? &cfg.cond : nullptr;
}

Tensor init_noise(Eigen::Index dim, const SamplerConfig& cfg) {
  return rng::normal_matrix(dim, cfg.batch, cfg.seed, rng::kInit, 0, cfg.base_index);
}

Tensor step_noise(Eigen::Index dim, const SamplerConfig& cfg, std::uint64_t step) {
  return rng::normal_matrix(dim, cfg.batch, cfg.seed, rng::kStepNoise, step, cfg.base_index);
}

void check_taus(const std::vector<int>& taus, int T) {
  if (taus.size() < 2) throw std::invalid_argument("timestep subsequence needs >= 2 points");
  if (taus.front() != 0) throw std::invalid_argument("timestep subsequence must start at 0");
  if (taus.back() != T) throw std::invalid_argument("timestep subsequence must end at T");
  for (std::size_t i = 1; i < taus.size(); ++i)
    if (taus[i] <= taus[i - 1])
      throw std::invalid_argument("timestep subsequence must be strictly increasing");
}

bool is_full_range(const std::vector<int>& taus, int T) {
  if (static_cast<int>(taus.size()) != T + 1) return false;
  for (int i = 0; i <= T; ++i)
    if (taus[i] != i) return false;
  return true;
}

Eigen::RowVectorXd gaussian_log_prob(const Tensor& x, const Tensor& mean, double std) {
  Eigen::Index d = x.rows();
  Eigen::RowVectorXd sq = (x - mean).colwise().squaredNorm();
  return (-0.5 / (std * std)) * sq.array() - 0.5 * d * (kLog2Pi + 2.0 * std::log(std));
}

X0EpsPair predict_pair(const Denoiser& model, const Tensor& x, int t, const SamplerConfig& cfg,
                       const VpDiscreteSchedule& s) {
  Prediction p = cfg_predict(model, x, static_cast<double>(t), cond_ptr(cfg), cfg.cfg_w);
  return to_x0_eps(p, s, /*clamp=*/true);
}

/// Variance of q(x_{t-1} | x_t, x0) on the full grid.
double posterior_var(const VpDiscreteSchedule& s, int t) {
  return (1.0 - s.alpha_at(t)) * (1.0 - s.abar(t - 1)) / (1.0 - s.abar(t));
}

/// Subsequence-safe stochasticity scale for a cur -> prev jump.
double ddim_sigma(const VpDiscreteSchedule& s, int cur, int prev, double eta) {
  if (prev == 0) return 0.0;
  double ab_c = s.abar(cur), ab_p = s.abar(prev);
  return eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_c)) * std::sqrt(1.0 - ab_c / ab_p);
}

}  // namespace

std::vector<int> full_range_taus(int T) {
  std::vector<int> taus(T + 1);
  for (int i = 0; i <= T; ++i) taus[i] = i;
  return taus;
}

std::vector<int> uniform_taus(int T, int steps) {
  if (steps < 1 || steps > T) throw std::invalid_argument("uniform_taus: need 1 <= steps <= T");
  std::vector<int> taus(steps + 1);
  for (int k = 0; k <= steps; ++k)
    taus[k] = static_cast<int>(std::lround(static_cast<double>(k) * T / steps));
  for (int k = 1; k <= steps; ++k)
    if (taus[k] <= taus[k - 1]) taus[k] = taus[k - 1] + 1;
  taus[steps] = T;
  return taus;
}

std::vector<double> uniform_trig_times(int steps) {
  if (steps < 1) throw std::invalid_argument("uniform_trig_times: need steps >= 1");
  std::vector<double> times(steps + 1);
  for (int k = 0; k <= steps; ++k) times[k] = (M_PI / 2.0) * (steps - k) / steps;
  return times;
}

Eigen::RowVectorXd Trajectory::total_log_prob() const {
  if (step_log_probs.empty()) return {};
  Eigen::RowVectorXd total = Eigen::RowVectorXd::Zero(step_log_probs.front().size());
  for (const auto& lp : step_log_probs) total += lp;
  return total;
}

Prediction cfg_predict(const Denoiser& model, const Tensor& x, double t, const Tensor* cond,
                       double w) {
  Prediction p;
  p.kind = model.kind;
  p.anchor = x;
  p.t = Eigen::VectorXd::Constant(x.cols(), t);
  if (model.cond_dim == 0) {
    if (w != 0.0)
      throw std::invalid_argument("cfg_predict: guidance weight on an unconditional model");
    p.value = model.eval(x, p.t, nullptr);
    return p;
  }
  Tensor pc = model.eval(x, p.t, cond);
  if (w == 0.0) {
    p.value = pc;
    return p;
  }
  Tensor pu = model.eval(x, p.t, nullptr);  // null token
  p.value = pc + w * (pc - pu);
  return p;
}

Trajectory ddpm_sample(const Denoiser& model, const VpDiscreteSchedule& s,
                       const SamplerConfig& cfg, DdpmVariant variant) {
  if (!cfg.taus.empty() && !is_full_range(cfg.taus, s.T))
    throw std::invalid_argument("ddpm_sample requires the full timestep range");

  Trajectory traj;
  Tensor x = init_noise(model.data_dim, cfg);
  traj.times.push_back(s.T);
  traj.states.push_back(x);

  for (int t = s.T; t >= 1; --t) {
    X0EpsPair pair = predict_pair(model, x, t, cfg, s);
    if (t == 1) {
      x = pair.x0;  // sigma_1 = 0: deterministic clean estimate
    } else if (variant == DdpmVariant::kFull) {
      double ab_p = s.abar(t - 1);
      double al = s.alpha_at(t);
      double omb = 1.0 - s.abar(t);
      Tensor mean = (std::sqrt(ab_p) * (1.0 - al) * pair.x0 +
                     std::sqrt(al) * (1.0 - ab_p) * x) /
                    omb;
      double sig = std::sqrt(posterior_var(s, t));
      Tensor next = mean + sig * step_noise(x.rows(), cfg, t);
      traj.step_log_probs.push_back(gaussian_log_prob(next, mean, sig));
      x = next;
    } else {
      double al = s.alpha_at(t);
      Tensor mean = (x - (1.0 - al) / std::sqrt(1.0 - s.abar(t)) * pair.eps) / std::sqrt(al);
      x = mean + std::sqrt(1.0 - s.abar(t - 1)) * step_noise(x.rows(), cfg, t);
    }
    traj.times.push_back(t - 1);
    traj.states.push_back(x);
  }
  traj.final = x;
  return traj;
}

Trajectory ddim_sample(const Denoiser& model, const VpDiscreteSchedule& s,
                       const SamplerConfig& cfg) {
  std::vector<int> taus = cfg.taus.empty() ? full_range_taus(s.T) : cfg.taus;
  check_taus(taus, s.T);

  Trajectory traj;
  Tensor x = init_noise(model.data_dim, cfg);
  traj.times.push_back(taus.back());
  traj.states.push_back(x);

  for (int n = static_cast<int>(taus.size()) - 1; n >= 1; --n) {
    int cur = taus[n], prev = taus[n - 1];
    X0EpsPair pair = predict_pair(model, x, cur, cfg, s);
    double sig = ddim_sigma(s, cur, prev, cfg.eta);
    double dir = std::sqrt(std::max(1.0 - s.abar(prev) - sig * sig, 0.0));
    Tensor mean = std::sqrt(s.abar(prev)) * pair.x0 + dir * pair.eps;
    if (sig > 0.0) {
      Tensor next = mean + sig * step_noise(x.rows(), cfg, cur);
      traj.step_log_probs.push_back(gaussian_log_prob(next, mean, sig));
      x = next;
    } else {
      x = mean;
    }
    traj.times.push_back(prev);
    traj.states.push_back(x);
  }
  traj.final = x;
  return traj;
}

Tensor smld_langevin_sample(const std::function<Tensor(const Tensor&)>& score_fn, double delta,
                            int n_steps, int dim, const SamplerConfig& cfg) {
  if (delta <= 0.0) throw std::invalid_argument("smld: step size must be positive");
  Tensor x = init_noise(dim, cfg);
  for (int k = 1; k <= n_steps; ++k) {
    Tensor s = score_fn(x);
    if (!s.allFinite()) throw std::runtime_error("smld: non-finite score");
    x += 0.5 * delta * s + std::sqrt(delta) * step_noise(dim, cfg, k);
  }
  return x;
}

Trajectory cm_multistep_sample(const Denoiser& f, const VeSchedule& s, int n_steps,
                               const SamplerConfig& cfg) {
  if (f.kind != Pred::kFCons && f.kind != Pred::kX0)
    throw std::invalid_argument("cm_multistep_sample needs a clean-sample map");
  std::vector<double> grid = s.grid(n_steps);

  Trajectory traj;
  Tensor x = s.T_max * init_noise(f.data_dim, cfg);
  traj.times.push_back(grid.back());
  traj.states.push_back(x);

  Tensor x0;
  for (int n = n_steps; n >= 1; --n) {
    double t = grid[n - 1];
    x0 = f(x, t, cond_ptr(cfg));
    if (n > 1) {
      double prev = grid[n - 2];
      double scale = std::sqrt(std::max(prev * prev - s.epsilon_min * s.epsilon_min, 0.0));
      x = x0 + scale * step_noise(x.rows(), cfg, n - 1);
      traj.times.push_back(prev);
      traj.states.push_back(x);
    }
  }
  traj.times.push_back(0.0);
  traj.states.push_back(x0);
  traj.final = x0;
  return traj;
}

Trajectory lcm_sample(const Denoiser& model, const VpDiscreteSchedule& s,
                      const SamplerConfig& cfg, const NoiseFn& noise_override) {
  std::vector<int> taus = cfg.taus.empty() ? full_range_taus(s.T) : cfg.taus;
  check_taus(taus, s.T);

  Trajectory traj;
  Tensor x = init_noise(model.data_dim, cfg);
  traj.times.push_back(taus.back());
  traj.states.push_back(x);

  for (int n = static_cast<int>(taus.size()) - 1; n >= 1; --n) {
    int cur = taus[n], prev = taus[n - 1];
    X0EpsPair pair = predict_pair(model, x, cur, cfg, s);
    if (prev == 0) {
      x = pair.x0;
    } else {
      Tensor zeta = noise_override ? noise_override(cur, x.rows(), x.cols())
                                   : step_noise(x.rows(), cfg, cur);
      x = std::sqrt(s.abar(prev)) * pair.x0 + std::sqrt(1.0 - s.abar(prev)) * zeta;
    }
    traj.times.push_back(prev);
    traj.states.push_back(x);
  }
  traj.final = x;
  return traj;
}

Trajectory instaflow_sample(const Denoiser& v_model, const VpDiscreteSchedule& s,
                            const SamplerConfig& cfg, InstaFlowVariant variant) {
  std::vector<int> taus = cfg.taus.empty() ? full_range_taus(s.T) : cfg.taus;
  check_taus(taus, s.T);
  if (variant != InstaFlowVariant::kDdim && !is_full_range(taus, s.T))
    throw std::invalid_argument("instaflow full/simplified variants require the full range");
  if (v_model.kind != Pred::kVRf)
    throw std::invalid_argument("instaflow_sample needs a rescaled-space velocity model");

  auto beta = [&s](int t) { return s.a(t) + std::sqrt(1.0 - s.abar(t)); };
  auto gamma = [&s, &beta](int t) { return s.a(t) / beta(t); };

  Trajectory traj;
  Tensor y = init_noise(v_model.data_dim, cfg);
  traj.times.push_back(taus.back());
  traj.states.push_back(beta(s.T) * y);  // states are kept in sample space

  for (int n = static_cast<int>(taus.size()) - 1; n >= 1; --n) {
    int cur = taus[n], prev = taus[n - 1];
    Prediction p = cfg_predict(v_model, y, static_cast<double>(cur), cond_ptr(cfg), cfg.cfg_w);
    Tensor x0 = y + (1.0 - gamma(cur)) * p.value;
    double beta_prev = beta(prev);

    if (variant == InstaFlowVariant::kFull) {
      if (prev == 0) {
        y = x0;
      } else {
        double ab_p = s.abar(prev);
        double al = s.alpha_at(cur);
        double omb = 1.0 - s.abar(cur);
        Tensor mean_x = (std::sqrt(ab_p) * (1.0 - al) * x0 +
                         std::sqrt(al) * (1.0 - ab_p) * (beta(cur) * y)) /
                        omb;
        double sig_y = std::sqrt(posterior_var(s, cur)) / beta_prev;
        Tensor mean_y = mean_x / beta_prev;
        Tensor next = mean_y + sig_y * step_noise(y.rows(), cfg, cur);
        traj.step_log_probs.push_back(gaussian_log_prob(next, mean_y, sig_y));
        y = next;
      }
    } else if (variant == InstaFlowVariant::kSimplified) {
      if (prev == 0) {
        y = x0;
      } else {
        Tensor zeta = step_noise(y.rows(), cfg, cur);
        y = (std::sqrt(s.abar(prev)) * x0 + std::sqrt(1.0 - s.abar(prev)) * zeta) / beta_prev;
      }
    } else {  // kDdim
      Tensor eps = y - gamma(cur) * p.value;
      double sig = ddim_sigma(s, cur, prev, cfg.eta);
      double dir = std::sqrt(std::max(1.0 - s.abar(prev) - sig * sig, 0.0));
      Tensor x_prev = std::sqrt(s.abar(prev)) * x0 + dir * eps;
      if (sig > 0.0) x_prev += sig * step_noise(y.rows(), cfg, cur);
      y = x_prev / beta_prev;
    }
    traj.times.push_back(prev);
    traj.states.push_back(beta_prev * y);
  }
  traj.final = y;  // beta_0 = 1, already in sample space
  return traj;
}

Tensor rf_euler_sample(const Denoiser& v_model, const RfSchedule&, int n_steps,
                       const SamplerConfig& cfg) {
  if (n_steps < 1) throw std::invalid_argument("rf_euler_sample: need n_steps >= 1");
  Tensor y = init_noise(v_model.data_dim, cfg);
  double dt = 1.0 / n_steps;
  for (int k = 0; k < n_steps; ++k) {
    double t = static_cast<double>(k) * dt;
    Prediction p = cfg_predict(v_model, y, t, cond_ptr(cfg), cfg.cfg_w);
    y += dt * p.value;
  }
  return y;
}

Tensor trigflow_sample(const Denoiser& v_model, const TrigSchedule& s,
                       const std::vector<double>& times, const SamplerConfig& cfg) {
  if (times.size() < 2) throw std::invalid_argument("trigflow_sample: need >= 2 times");
  if (std::abs(times.front() - s.t_hi()) > 1e-9)
    throw std::invalid_argument("trigflow_sample: times must start at pi/2");
  for (double t : times)
    if (t < 0.0 || t > s.t_hi() + 1e-12)
      throw std::invalid_argument("trigflow_sample: time outside [0, pi/2]");

  Tensor x = s.sigma_data * init_noise(v_model.data_dim, cfg);
  for (std::size_t i = 0; i + 1 < times.size(); ++i) {
    double from = times[i], to = times[i + 1];
    if (to > from) throw std::invalid_argument("trigflow_sample: times must be descending");
    Prediction p = cfg_predict(v_model, x, from, cond_ptr(cfg), cfg.cfg_w);
    x = std::cos(from - to) * x - std::sin(from - to) * p.value;
  }
  return x;
}

}  // namespace dlab
