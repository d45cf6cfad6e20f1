#pragma once

#include <cstdint>
#include <vector>

#include "dlab/rng.hpp"
#include "dlab/schedules.hpp"

namespace dlab {

/// Closed-form Gaussian mixture. A linearly diffused mixture is again a
/// mixture (means scaled by the signal coefficient, covariances a^2*Sigma +
/// b^2*I), so one struct covers the clean target and every noised marginal.
struct GmmOracle {
  Eigen::VectorXd weights;             // k, sums to 1
  std::vector<Eigen::VectorXd> means;  // k entries of length d
  std::vector<Eigen::MatrixXd> covs;   // k SPD matrices, d x d

  int dim() const { return means.empty() ? 0 : static_cast<int>(means[0].size()); }
  int components() const { return static_cast<int>(weights.size()); }
  void validate() const;

  /// Mixture after x -> a*x + b*eps with eps ~ N(0, I).
  GmmOracle diffused(double a, double b) const;

  Eigen::VectorXd mean() const;
  Eigen::MatrixXd covariance() const;

  static GmmOracle single(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov);
  /// k equal-weight isotropic components on a circle of the given radius.
  static GmmOracle ring(int k = 8, double radius = 2.0, double sigma = 0.1);
  /// 1-D pair of equal-weight modes at +-center.
  static GmmOracle two_mode(double center = 1.0, double sigma = 0.2);
};

Tensor sample_gmm(const GmmOracle& g, int n, std::uint64_t seed);
/// Draws plus the component index of each column.
std::pair<Tensor, Eigen::VectorXi> sample_gmm_labeled(const GmmOracle& g, int n,
                                                      std::uint64_t seed);

/// log q(x) per column.
Eigen::RowVectorXd gmm_log_density(const GmmOracle& g, const Tensor& x);
/// grad_x log q(x) per column (responsibility-weighted component scores).
Tensor gmm_score(const GmmOracle& g, const Tensor& x);
/// E[x0 | x_t] when x_t = a*x0 + b*eps and x0 ~ g; exact posterior mean,
/// well defined at both endpoints (a = 0 and b = 0).
Tensor gmm_posterior_mean_x0(const GmmOracle& g, const Tensor& x_t, double a, double b);

// Schedule-specific diffused marginals and their scores.
GmmOracle diffused_gmm(const GmmOracle& g, const VpDiscreteSchedule& s, int t);
GmmOracle diffused_gmm(const GmmOracle& g, const VeSchedule& s, double t);
GmmOracle diffused_gmm(const GmmOracle& g, const TrigSchedule& s, double t);
GmmOracle diffused_gmm(const GmmOracle& g, const RfSchedule& s, double t);
Tensor diffused_score(const GmmOracle& g, const Tensor& x_t, int t, const VpDiscreteSchedule& s);
Tensor diffused_score(const GmmOracle& g, const Tensor& x_t, double t, const VeSchedule& s);
Tensor diffused_score(const GmmOracle& g, const Tensor& x_t, double t, const TrigSchedule& s);
Tensor diffused_score(const GmmOracle& g, const Tensor& x_t, double t, const RfSchedule& s);

/// 2-D spiral dataset (no analytic density); scaled to roughly unit spread.
Tensor swiss_roll(int n, std::uint64_t seed, double noise = 0.05);

struct MetricsReport {
  double mean_error = 0.0;        // l2 distance of sample mean to target mean
  double cov_error = 0.0;         // Frobenius distance of covariances
  double energy_distance = 0.0;   // vs fresh oracle draws
  Eigen::VectorXd mode_mass;      // nearest-mean assignment within 3 sigma
  double unassigned_mass = 0.0;
  int n_samples = 0;
  int n_reference = 0;
};

/// Unbiased two-sample energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'|.
double energy_distance(const Tensor& a, const Tensor& b, int max_pairs = 2000,
                       std::uint64_t seed = 0);

MetricsReport distribution_metrics(const Tensor& samples, const GmmOracle& target, int n_ref,
                                   std::uint64_t seed);
/// Against an empirical reference batch (for datasets without closed form).
MetricsReport distribution_metrics(const Tensor& samples, const Tensor& reference);

}  // namespace dlab
