#include "dlab/toyworld.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dlab {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

struct ComponentCache {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double log_norm;  // -0.5 * (d log 2pi + log det)
};

std::vector<ComponentCache> factorize(const GmmOracle& g) {
  std::vector<ComponentCache> cache(g.components());
  for (int i = 0; i < g.components(); ++i) {
    cache[i].llt.compute(g.covs[i]);
    if (cache[i].llt.info() != Eigen::Success)
      throw std::invalid_argument("gmm component covariance is not positive definite");
    double log_det = 0.0;
    const auto& L = cache[i].llt.matrixL();
    for (int r = 0; r < g.dim(); ++r) log_det += 2.0 * std::log(L(r, r));
    cache[i].log_norm = -0.5 * (g.dim() * kLog2Pi + log_det);
  }
  return cache;
}

/// Per-column component log joint densities log(w_i) + log N(x | mu_i, S_i),
/// shape k x n.
Tensor component_log_joint(const GmmOracle& g, const Tensor& x,
                           const std::vector<ComponentCache>& cache) {
  Tensor lj(g.components(), x.cols());
  for (int i = 0; i < g.components(); ++i) {
    Tensor centered = x.colwise() - g.means[i];
    Tensor solved = cache[i].llt.solve(centered);
    Eigen::RowVectorXd quad = (centered.array() * solved.array()).colwise().sum();
    lj.row(i) = (-0.5) * quad.array() + cache[i].log_norm + std::log(g.weights(i));
  }
  return lj;
}

Eigen::RowVectorXd log_sum_exp_cols(const Tensor& m) {
  Eigen::RowVectorXd mx = m.colwise().maxCoeff();
  Eigen::RowVectorXd out(m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    out(j) = mx(j) + std::log((m.col(j).array() - mx(j)).exp().sum());
  return out;
}

}  // namespace

void GmmOracle::validate() const {
  if (components() == 0) throw std::invalid_argument("gmm needs at least one component");
  if (std::abs(weights.sum() - 1.0) > 1e-9)
    throw std::invalid_argument("gmm weights must sum to 1");
  if ((weights.array() < 0).any()) throw std::invalid_argument("gmm weights must be nonnegative");
  for (const auto& m : means)
    if (m.size() != dim()) throw std::invalid_argument("gmm mean dimension mismatch");
  for (const auto& c : covs)
    if (c.rows() != dim() || c.cols() != dim())
      throw std::invalid_argument("gmm covariance dimension mismatch");
  factorize(*this);
}

GmmOracle GmmOracle::diffused(double a, double b) const {
  GmmOracle out = *this;
  for (int i = 0; i < components(); ++i) {
    out.means[i] = a * means[i];
    out.covs[i] = a * a * covs[i] + b * b * Eigen::MatrixXd::Identity(dim(), dim());
  }
  return out;
}

Eigen::VectorXd GmmOracle::mean() const {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(dim());
  for (int i = 0; i < components(); ++i) m += weights(i) * means[i];
  return m;
}

Eigen::MatrixXd GmmOracle::covariance() const {
  Eigen::VectorXd m = mean();
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(dim(), dim());
  for (int i = 0; i < components(); ++i)
    c += weights(i) * (covs[i] + means[i] * means[i].transpose());
  return c - m * m.transpose();
}

GmmOracle GmmOracle::single(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
  GmmOracle g;
  g.weights = Eigen::VectorXd::Ones(1);
  g.means = {mean};
  g.covs = {cov};
  return g;
}

GmmOracle GmmOracle::ring(int k, double radius, double sigma) {
  GmmOracle g;
  g.weights = Eigen::VectorXd::Constant(k, 1.0 / k);
  for (int i = 0; i < k; ++i) {
    double th = 2.0 * M_PI * i / k;
    Eigen::VectorXd mu(2);
    mu << radius * std::cos(th), radius * std::sin(th);
    g.means.push_back(mu);
    g.covs.push_back(sigma * sigma * Eigen::MatrixXd::Identity(2, 2));
  }
  return g;
}

GmmOracle GmmOracle::two_mode(double center, double sigma) {
  GmmOracle g;
  g.weights = Eigen::VectorXd::Constant(2, 0.5);
  g.means = {Eigen::VectorXd::Constant(1, -center), Eigen::VectorXd::Constant(1, center)};
  g.covs = {Eigen::MatrixXd::Constant(1, 1, sigma * sigma),
            Eigen::MatrixXd::Constant(1, 1, sigma * sigma)};
  return g;
}

std::pair<Tensor, Eigen::VectorXi> sample_gmm_labeled(const GmmOracle& g, int n,
                                                      std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_gmm: n must be >= 1");
  auto cache = factorize(g);
  std::vector<Eigen::MatrixXd> chol(g.components());
  for (int i = 0; i < g.components(); ++i) chol[i] = cache[i].llt.matrixL();

  Eigen::VectorXd cum(g.components());
  std::partial_sum(g.weights.data(), g.weights.data() + g.components(), cum.data());

  Tensor x(g.dim(), n);
  Eigen::VectorXi labels(n);
  for (int j = 0; j < n; ++j) {
    rng::Stream pick(seed, rng::kData, 0, static_cast<std::uint64_t>(j));
    double u = pick.uniform();
    int comp = 0;
    while (comp + 1 < g.components() && u > cum(comp)) ++comp;
    rng::Stream draw(seed, rng::kData, 1, static_cast<std::uint64_t>(j));
    Eigen::VectorXd z(g.dim());
    for (int r = 0; r < g.dim(); ++r) z(r) = draw.normal();
    x.col(j) = g.means[comp] + chol[comp] * z;
    labels(j) = comp;
  }
  return {x, labels};
}

Tensor sample_gmm(const GmmOracle& g, int n, std::uint64_t seed) {
  return sample_gmm_labeled(g, n, seed).first;
}

Eigen::RowVectorXd gmm_log_density(const GmmOracle& g, const Tensor& x) {
  return log_sum_exp_cols(component_log_joint(g, x, factorize(g)));
}

Tensor gmm_score(const GmmOracle& g, const Tensor& x) {
  auto cache = factorize(g);
  Tensor lj = component_log_joint(g, x, cache);
  Eigen::RowVectorXd lz = log_sum_exp_cols(lj);

  Tensor score = Tensor::Zero(g.dim(), x.cols());
  for (int i = 0; i < g.components(); ++i) {
    Eigen::RowVectorXd resp = (lj.row(i) - lz).array().exp();
    Tensor comp_score = -cache[i].llt.solve(x.colwise() - g.means[i]);
    score += comp_score * resp.asDiagonal();
  }
  return score;
}

Tensor gmm_posterior_mean_x0(const GmmOracle& g, const Tensor& x_t, double a, double b) {
  if (b == 0.0) {
    if (a == 0.0) throw std::invalid_argument("posterior mean undefined at a = b = 0");
    return x_t / a;
  }
  GmmOracle gt = g.diffused(a, b);
  auto cache = factorize(gt);
  Tensor lj = component_log_joint(gt, x_t, cache);
  Eigen::RowVectorXd lz = log_sum_exp_cols(lj);

  // Per component, (x0, x_t) is jointly Gaussian with cross-covariance
  // a*Sigma_i, so E_i[x0 | x_t] = mu_i + a Sigma_i (a^2 Sigma_i + b^2 I)^{-1}
  // (x_t - a mu_i); mix with the responsibilities.
  Tensor mean = Tensor::Zero(g.dim(), x_t.cols());
  for (int i = 0; i < g.components(); ++i) {
    Eigen::RowVectorXd resp = (lj.row(i) - lz).array().exp();
    Tensor centered = x_t.colwise() - gt.means[i];
    Tensor cond = (a * g.covs[i]) * cache[i].llt.solve(centered);
    cond.colwise() += g.means[i];
    mean += cond * resp.asDiagonal();
  }
  return mean;
}

GmmOracle diffused_gmm(const GmmOracle& g, const VpDiscreteSchedule& s, int t) {
  return g.diffused(s.a(t), std::sqrt(1.0 - s.abar(t)));
}
GmmOracle diffused_gmm(const GmmOracle& g, const VeSchedule& s, double t) {
  return g.diffused(1.0, s.noise_scale(t));
}
GmmOracle diffused_gmm(const GmmOracle& g, const TrigSchedule& s, double t) {
  return g.diffused(std::cos(t), std::sin(t) * s.sigma_data);
}
GmmOracle diffused_gmm(const GmmOracle& g, const RfSchedule& s, double t) {
  return g.diffused(s.data_coef(t), s.noise_coef(t));
}

Tensor diffused_score(const GmmOracle& g, const Tensor& x_t, int t, const VpDiscreteSchedule& s) {
  return gmm_score(diffused_gmm(g, s, t), x_t);
}
Tensor diffused_score(const GmmOracle& g, const Tensor& x_t, double t, const VeSchedule& s) {
  return gmm_score(diffused_gmm(g, s, t), x_t);
}
Tensor diffused_score(const GmmOracle& g, const Tensor& x_t, double t, const TrigSchedule& s) {
  return gmm_score(diffused_gmm(g, s, t), x_t);
}
Tensor diffused_score(const GmmOracle& g, const Tensor& x_t, double t, const RfSchedule& s) {
  return gmm_score(diffused_gmm(g, s, t), x_t);
}

Tensor swiss_roll(int n, std::uint64_t seed, double noise) {
  if (n < 1) throw std::invalid_argument("swiss_roll: n must be >= 1");
  Tensor x(2, n);
  for (int j = 0; j < n; ++j) {
    rng::Stream st(seed, rng::kData, 2, static_cast<std::uint64_t>(j));
    double a = 1.5 * M_PI * (1.0 + 2.0 * st.uniform());
    x(0, j) = a * std::cos(a) / (4.5 * M_PI) * 2.0 + noise * st.normal();
    x(1, j) = a * std::sin(a) / (4.5 * M_PI) * 2.0 + noise * st.normal();
  }
  return x;
}

double energy_distance(const Tensor& a, const Tensor& b, int max_pairs, std::uint64_t seed) {
  if (a.cols() == 0 || b.cols() == 0)
    throw std::invalid_argument("energy_distance: empty sample set");

  auto subsample = [&](const Tensor& m, std::uint64_t stream_step) {
    if (m.cols() <= max_pairs) return m;
    Tensor out(m.rows(), max_pairs);
    rng::Stream st(seed, rng::kMetrics, stream_step, 0);
    for (int j = 0; j < max_pairs; ++j)
      out.col(j) = m.col(st.uniform_int(0, static_cast<int>(m.cols()) - 1));
    return out;
  };
  Tensor xs = subsample(a, 0), ys = subsample(b, 1);

  auto mean_cross = [](const Tensor& u, const Tensor& v) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < u.cols(); ++i)
      acc += (v.colwise() - Eigen::VectorXd(u.col(i))).colwise().norm().sum();
    return acc / (static_cast<double>(u.cols()) * v.cols());
  };
  auto mean_within = [](const Tensor& u) {
    if (u.cols() < 2) return 0.0;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < u.cols(); ++i)
      for (Eigen::Index j = i + 1; j < u.cols(); ++j) acc += (u.col(i) - u.col(j)).norm();
    return 2.0 * acc / (static_cast<double>(u.cols()) * (u.cols() - 1));
  };
  return 2.0 * mean_cross(xs, ys) - mean_within(xs) - mean_within(ys);
}

namespace {

MetricsReport moments_report(const Tensor& samples, const Eigen::VectorXd& target_mean,
                             const Eigen::MatrixXd& target_cov) {
  MetricsReport r;
  r.n_samples = static_cast<int>(samples.cols());
  Eigen::VectorXd m = samples.rowwise().mean();
  Tensor centered = samples.colwise() - m;
  Eigen::MatrixXd cov = centered * centered.transpose() / std::max<double>(1, samples.cols() - 1);
  r.mean_error = (m - target_mean).norm();
  r.cov_error = (cov - target_cov).norm();
  return r;
}

}  // namespace

MetricsReport distribution_metrics(const Tensor& samples, const GmmOracle& target, int n_ref,
                                   std::uint64_t seed) {
  if (samples.cols() == 0) throw std::invalid_argument("distribution_metrics: empty input");
  MetricsReport r = moments_report(samples, target.mean(), target.covariance());
  Tensor ref = sample_gmm(target, n_ref, rng::mix(seed ^ 0x9e3779b97f4a7c15ull));
  r.n_reference = n_ref;
  r.energy_distance = energy_distance(samples, ref, 2000, seed);

  r.mode_mass = Eigen::VectorXd::Zero(target.components());
  std::vector<double> radius(target.components());
  for (int i = 0; i < target.components(); ++i)
    radius[i] = 3.0 * std::sqrt(target.covs[i].diagonal().maxCoeff());
  int unassigned = 0;
  for (Eigen::Index j = 0; j < samples.cols(); ++j) {
    int best = -1;
    double best_d = 0.0;
    for (int i = 0; i < target.components(); ++i) {
      double d = (samples.col(j) - target.means[i]).norm();
      if (best < 0 || d < best_d) {
        best = i;
        best_d = d;
      }
    }
    if (best_d <= radius[best])
      r.mode_mass(best) += 1.0;
    else
      ++unassigned;
  }
  r.mode_mass /= static_cast<double>(samples.cols());
  r.unassigned_mass = static_cast<double>(unassigned) / samples.cols();
  return r;
}

MetricsReport distribution_metrics(const Tensor& samples, const Tensor& reference) {
  if (samples.cols() == 0 || reference.cols() == 0)
    throw std::invalid_argument("distribution_metrics: empty input");
  Eigen::VectorXd m = reference.rowwise().mean();
  Tensor centered = reference.colwise() - m;
  Eigen::MatrixXd cov =
      centered * centered.transpose() / std::max<double>(1, reference.cols() - 1);
  MetricsReport r = moments_report(samples, m, cov);
  r.n_reference = static_cast<int>(reference.cols());
  r.energy_distance = energy_distance(samples, reference);
  return r;
}

}  // namespace dlab
