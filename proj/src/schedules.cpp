#include "dlab/schedules.hpp"

#include <cmath>
#include <stdexcept>

namespace dlab {

double VpDiscreteSchedule::abar(int t) const {
  if (t < 0 || t > T) throw std::out_of_range("VpDiscreteSchedule: t outside [0, T]");
  return alpha_bar(t);
}

double VpDiscreteSchedule::one_minus_abar(int t) const {
  return std::max(1.0 - abar(t), 1e-12);
}

double VpDiscreteSchedule::alpha_at(int t) const {
  if (t < 1 || t > T) throw std::out_of_range("VpDiscreteSchedule: alpha index outside [1, T]");
  return alpha(t);
}

VpDiscreteSchedule build_vp_schedule(int T, double beta_start, double beta_end,
                                     const std::string& kind) {
  if (T < 1) throw std::invalid_argument("build_vp_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw std::invalid_argument("build_vp_schedule: need 0 < beta_start <= beta_end < 1");
  VpDiscreteSchedule s;
  s.T = T;
  s.beta = Eigen::VectorXd::Zero(T + 1);
  if (kind == "linear") {
    for (int t = 1; t <= T; ++t) {
      double u = (T > 1) ? static_cast<double>(t - 1) / (T - 1) : 0.0;
      s.beta(t) = beta_start + (beta_end - beta_start) * u;
    }
  } else if (kind == "cosine") {
    // Squared-cosine signal curve; betas derived from consecutive ratios and
    // clamped into the valid range, then the products rebuilt exactly.
    auto f = [T](double t) {
      double v = std::cos((t / T + 0.008) / 1.008 * M_PI / 2.0);
      return v * v;
    };
    double f0 = f(0.0);
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
      double cur = f(static_cast<double>(t)) / f0;
      double bt = 1.0 - cur / prev;
      s.beta(t) = std::min(std::max(bt, 1e-8), 0.999);
      prev = cur;
    }
  } else {
    throw std::invalid_argument("build_vp_schedule: unknown kind " + kind);
  }
  s.alpha = 1.0 - s.beta.array();
  s.alpha(0) = 1.0;
  s.alpha_bar = Eigen::VectorXd::Ones(T + 1);
  for (int t = 1; t <= T; ++t) s.alpha_bar(t) = s.alpha_bar(t - 1) * s.alpha(t);
  return s;
}

std::vector<double> VeSchedule::grid(int N) const {
  if (N < 1) throw std::invalid_argument("VeSchedule::grid: N must be >= 1");
  if (N == 1) return {T_max};
  std::vector<double> t(N);
  double lo = std::pow(epsilon_min, 1.0 / rho);
  double hi = std::pow(T_max, 1.0 / rho);
  for (int n = 1; n <= N; ++n) {
    double u = lo + (hi - lo) * static_cast<double>(n - 1) / (N - 1);
    t[n - 1] = std::pow(u, rho);
  }
  t.front() = epsilon_min;
  t.back() = T_max;
  return t;
}

double VeSchedule::noise_scale(double t) const {
  if (t < epsilon_min || t > T_max) throw std::out_of_range("VeSchedule: t outside domain");
  return std::sqrt(std::max(t * t - epsilon_min * epsilon_min, 0.0));
}

Tensor forward_diffuse(const VpDiscreteSchedule& s, const Tensor& x0, const Eigen::VectorXi& t,
                       const Tensor& noise) {
  if (t.size() != x0.cols()) throw std::invalid_argument("forward_diffuse: one t per sample");
  Tensor out(x0.rows(), x0.cols());
  for (Eigen::Index j = 0; j < x0.cols(); ++j) {
    double ab = s.abar(t(j));
    out.col(j) = std::sqrt(ab) * x0.col(j) + std::sqrt(1.0 - ab) * noise.col(j);
  }
  return out;
}

Tensor forward_diffuse(const VpDiscreteSchedule& s, const Tensor& x0, int t, const Tensor& noise) {
  double ab = s.abar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

Tensor forward_diffuse(const VeSchedule& s, const Tensor& x0, const Eigen::VectorXd& t,
                       const Tensor& noise) {
  if (t.size() != x0.cols()) throw std::invalid_argument("forward_diffuse: one t per sample");
  Tensor out(x0.rows(), x0.cols());
  for (Eigen::Index j = 0; j < x0.cols(); ++j)
    out.col(j) = x0.col(j) + s.noise_scale(t(j)) * noise.col(j);
  return out;
}

Tensor forward_diffuse(const VeSchedule& s, const Tensor& x0, double t, const Tensor& noise) {
  return x0 + s.noise_scale(t) * noise;
}

Tensor forward_diffuse(const RfSchedule& s, const Tensor& x0, const Eigen::VectorXd& t,
                       const Tensor& noise) {
  if (t.size() != x0.cols()) throw std::invalid_argument("forward_diffuse: one t per sample");
  Tensor out(x0.rows(), x0.cols());
  for (Eigen::Index j = 0; j < x0.cols(); ++j) {
    if (t(j) < 0.0 || t(j) > 1.0) throw std::out_of_range("RfSchedule: t outside [0, 1]");
    out.col(j) = s.data_coef(t(j)) * x0.col(j) + s.noise_coef(t(j)) * noise.col(j);
  }
  return out;
}

Tensor forward_diffuse(const RfSchedule& s, const Tensor& x0, double t, const Tensor& noise) {
  if (t < 0.0 || t > 1.0) throw std::out_of_range("RfSchedule: t outside [0, 1]");
  return s.data_coef(t) * x0 + s.noise_coef(t) * noise;
}

Tensor forward_diffuse(const TrigSchedule& s, const Tensor& x0, const Eigen::VectorXd& t,
                       const Tensor& noise) {
  if (t.size() != x0.cols()) throw std::invalid_argument("forward_diffuse: one t per sample");
  Tensor out(x0.rows(), x0.cols());
  for (Eigen::Index j = 0; j < x0.cols(); ++j) {
    if (t(j) < 0.0 || t(j) > s.t_hi()) throw std::out_of_range("TrigSchedule: t outside domain");
    out.col(j) = std::cos(t(j)) * x0.col(j) + std::sin(t(j)) * s.sigma_data * noise.col(j);
  }
  return out;
}

Tensor forward_diffuse(const TrigSchedule& s, const Tensor& x0, double t, const Tensor& noise) {
  if (t < 0.0 || t > s.t_hi()) throw std::out_of_range("TrigSchedule: t outside domain");
  return std::cos(t) * x0 + std::sin(t) * s.sigma_data * noise;
}

PosteriorParams posterior_params(const VpDiscreteSchedule& s, const Tensor& x_t, int t,
                                 const Tensor& given, PosteriorGiven kind, PosteriorForm form) {
  if (t < 1 || t > s.T) throw std::out_of_range("posterior_params: t must be in [1, T]");
  double ab_t = s.abar(t);
  double ab_p = s.abar(t - 1);
  double al_t = s.alpha_at(t);
  double omb_t = s.one_minus_abar(t);
  double var = (1.0 - al_t) * (1.0 - ab_p) / omb_t;

  // Complete the (x0, eps) pair from whichever was given, anchored at x_t.
  Tensor x0, eps;
  if (kind == PosteriorGiven::kX0) {
    x0 = given;
    eps = (x_t - std::sqrt(ab_t) * x0) / std::sqrt(omb_t);
  } else {
    eps = given;
    x0 = (x_t - std::sqrt(omb_t) * eps) / std::sqrt(ab_t);
  }

  PosteriorParams out;
  out.std = std::sqrt(std::max(var, 0.0));
  double dir = std::sqrt(std::max(1.0 - ab_p - var, 0.0));
  switch (form) {
    case PosteriorForm::kConvexX0State:
      out.mean = (std::sqrt(ab_p) * (1.0 - al_t) * x0 + std::sqrt(al_t) * (1.0 - ab_p) * x_t) / omb_t;
      break;
    case PosteriorForm::kX0DirNoise:
      out.mean = std::sqrt(ab_p) * x0 + dir * eps;
      break;
    case PosteriorForm::kStateDirNoise:
      out.mean = std::sqrt(ab_p) * (x_t - std::sqrt(omb_t) * eps) / std::sqrt(ab_t) + dir * eps;
      break;
    case PosteriorForm::kSplitX0State:
      out.mean = (std::sqrt(ab_p) - dir * std::sqrt(ab_t) / std::sqrt(omb_t)) * x0 +
                 dir / std::sqrt(omb_t) * x_t;
      break;
  }
  return out;
}

}  // namespace dlab
