#pragma once

#include <string>
#include <vector>

#include "dlab/rng.hpp"

namespace dlab {

/// Discrete variance-preserving schedule. Arrays are indexed by absolute
/// timestep; index 0 is the clean boundary (abar(0) = 1), so t = 1 posteriors
/// and subsequence endpoints at t = 0 are well defined.
struct VpDiscreteSchedule {
  int T = 0;
  Eigen::VectorXd beta;       // beta(0) = 0 sentinel, beta(1..T) per-step variances
  Eigen::VectorXd alpha;      // 1 - beta
  Eigen::VectorXd alpha_bar;  // running product, alpha_bar(0) = 1

  double abar(int t) const;
  double a(int t) const { return std::sqrt(abar(t)); }                      // signal scale
  double b(int t) const { return std::sqrt(one_minus_abar(t)); }            // noise scale
  double one_minus_abar(int t) const;  // floored at 1e-12 for safe division
  double alpha_at(int t) const;
};

VpDiscreteSchedule build_vp_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02,
                                     const std::string& kind = "linear");

/// Continuous variance-exploding schedule with the standard rho-warped
/// discretization grid; noise std at time t is sqrt(t^2 - epsilon_min^2).
struct VeSchedule {
  double epsilon_min = 0.002;
  double T_max = 80.0;
  double sigma_data = 0.5;
  double rho = 7.0;

  /// Ascending grid t_1 = epsilon_min .. t_N = T_max.
  std::vector<double> grid(int N) const;
  double noise_scale(double t) const;
};

/// Linear interpolation path from noise (t = 0) to data (t = 1) with the
/// minimal-time clip applied on the noise side.
struct RfSchedule {
  double sigma_min = 1e-5;

  double data_coef(double t) const { return t; }
  double noise_coef(double t) const { return 1.0 - (1.0 - sigma_min) * t; }
};

/// Angular path x_t = cos(t) x0 + sin(t) * sigma * unit-noise on [0, pi/2].
struct TrigSchedule {
  double sigma_data = 0.5;

  double t_hi() const { return M_PI / 2.0; }
};

Tensor forward_diffuse(const VpDiscreteSchedule& s, const Tensor& x0, const Eigen::VectorXi& t,
                       const Tensor& noise);
Tensor forward_diffuse(const VpDiscreteSchedule& s, const Tensor& x0, int t, const Tensor& noise);
Tensor forward_diffuse(const VeSchedule& s, const Tensor& x0, const Eigen::VectorXd& t,
                       const Tensor& noise);
Tensor forward_diffuse(const VeSchedule& s, const Tensor& x0, double t, const Tensor& noise);
/// `x0` is the data endpoint (coefficient t), `noise` the t = 0 endpoint.
Tensor forward_diffuse(const RfSchedule& s, const Tensor& x0, const Eigen::VectorXd& t,
                       const Tensor& noise);
Tensor forward_diffuse(const RfSchedule& s, const Tensor& x0, double t, const Tensor& noise);
Tensor forward_diffuse(const TrigSchedule& s, const Tensor& x0, const Eigen::VectorXd& t,
                       const Tensor& noise);
Tensor forward_diffuse(const TrigSchedule& s, const Tensor& x0, double t, const Tensor& noise);

enum class PosteriorGiven { kX0, kEps };
/// Four algebraic arrangements of the same reverse-transition mean; they must
/// agree pointwise, so any disagreement flags an algebra bug upstream.
///   kConvexX0State: convex mix of x0 and x_t over the variance split
///   kX0DirNoise:    signal-scaled x0 plus a direction term on eps
///   kStateDirNoise: x_t minus the over-shrunk eps contribution
///   kSplitX0State:  direction form re-expanded onto (x0, x_t) coefficients
enum class PosteriorForm { kConvexX0State, kX0DirNoise, kStateDirNoise, kSplitX0State };

struct PosteriorParams {
  Tensor mean;
  double std = 0.0;
};

/// Mean and std of q(x_{t-1} | x_t, x0) on the full step grid. `given`
/// supplies either x0 or eps; the other is derived from the anchor (x_t, t).
PosteriorParams posterior_params(const VpDiscreteSchedule& s, const Tensor& x_t, int t,
                                 const Tensor& given, PosteriorGiven kind,
                                 PosteriorForm form = PosteriorForm::kConvexX0State);

}  // namespace dlab
