#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "dlab/rng.hpp"
#include "dlab/schedules.hpp"
#include "dlab/toyworld.hpp"

using namespace dlab;

TEST_SUITE("toyworld") {

TEST_CASE("mixture factories and moments") {
  auto ring = GmmOracle::ring(8, 2.0, 0.1);
  ring.validate();
  CHECK(ring.components() == 8);
  CHECK(ring.dim() == 2);
  CHECK(ring.weights.sum() == doctest::Approx(1.0).epsilon(1e-15));
  for (int i = 0; i < 8; ++i) CHECK(ring.means[i].norm() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(ring.mean().norm() < 1e-12);
  // eight equally spaced unit angles average cos^2 to 1/2
  Eigen::MatrixXd expect = 2.01 * Eigen::MatrixXd::Identity(2, 2);
  CHECK((ring.covariance() - expect).norm() < 1e-12);

  auto two = GmmOracle::two_mode(1.0, 0.2);
  two.validate();
  CHECK(two.dim() == 1);
  CHECK(two.mean()(0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(two.covariance()(0, 0) == doctest::Approx(1.04).epsilon(1e-15));

  auto single = GmmOracle::single(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  single.validate();
  CHECK(single.components() == 1);

  GmmOracle bad = two;
  bad.weights(0) = 0.9;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  GmmOracle degenerate = single;
  degenerate.covs[0] = -Eigen::MatrixXd::Identity(2, 2);
  CHECK_THROWS_AS(degenerate.validate(), std::invalid_argument);
}

TEST_CASE("diffusion scales means and inflates covariances") {
  auto ring = GmmOracle::ring(8, 2.0, 0.1);
  auto d = ring.diffused(0.5, 0.8);
  for (int i = 0; i < 8; ++i) {
    CHECK((d.means[i] - 0.5 * ring.means[i]).norm() == 0.0);
    Eigen::MatrixXd expect = 0.25 * ring.covs[i] + 0.8 * 0.8 * Eigen::MatrixXd::Identity(2, 2);
    CHECK((d.covs[i] - expect).norm() == 0.0);
  }

  auto vp = build_vp_schedule(100, 1e-4, 0.02);
  auto dvp = diffused_gmm(ring, vp, 60);
  double a = std::sqrt(vp.abar(60)), b2 = 1.0 - vp.abar(60);
  CHECK((dvp.means[0] - a * ring.means[0]).norm() < 1e-15);
  CHECK((dvp.covs[0] - (a * a * ring.covs[0] + b2 * Eigen::MatrixXd::Identity(2, 2))).norm() <
        1e-15);

  VeSchedule ve;
  auto dve = diffused_gmm(ring, ve, 10.0);
  CHECK((dve.means[0] - ring.means[0]).norm() == 0.0);
  CHECK(dve.covs[0](0, 0) ==
        doctest::Approx(ring.covs[0](0, 0) + ve.noise_scale(10.0) * ve.noise_scale(10.0))
            .epsilon(1e-12));

  TrigSchedule trig;
  auto dtr = diffused_gmm(ring, trig, 0.7);
  CHECK((dtr.means[0] - std::cos(0.7) * ring.means[0]).norm() < 1e-15);

  RfSchedule rf;
  auto drf = diffused_gmm(ring, rf, 0.25);
  CHECK((drf.means[0] - 0.25 * ring.means[0]).norm() < 1e-15);
}

TEST_CASE("mixture sampling is seeded and matches its moments") {
  auto single = GmmOracle::single(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  int n = 100000;
  Tensor s = sample_gmm(single, n, 3);
  Eigen::VectorXd m = s.rowwise().mean();
  Tensor centered = s.colwise() - m;
  Eigen::MatrixXd cov = centered * centered.transpose() / (n - 1);
  double se_diag = std::sqrt(2.0 / n), se_off = 1.0 / std::sqrt(static_cast<double>(n));
  CHECK(std::abs(cov(0, 0) - 1.0) < 3 * se_diag);
  CHECK(std::abs(cov(1, 1) - 1.0) < 3 * se_diag);
  CHECK(std::abs(cov(0, 1)) < 3 * se_off);
  CHECK(m.norm() < 3.0 * std::sqrt(2.0 / n));

  CHECK(sample_gmm(single, 64, 5) == sample_gmm(single, 64, 5));
  CHECK(sample_gmm(single, 64, 5) != sample_gmm(single, 64, 6));
  CHECK_THROWS_AS(sample_gmm(single, 0, 1), std::invalid_argument);

  GmmOracle lopsided;
  lopsided.weights = Eigen::VectorXd(2);
  lopsided.weights << 1.0, 0.0;
  lopsided.means = {Eigen::VectorXd::Constant(1, -5.0), Eigen::VectorXd::Constant(1, 5.0)};
  lopsided.covs = {Eigen::MatrixXd::Constant(1, 1, 0.01), Eigen::MatrixXd::Constant(1, 1, 0.01)};
  auto [draws, labels] = sample_gmm_labeled(lopsided, 500, 9);
  CHECK(labels.maxCoeff() == 0);
  CHECK(draws.maxCoeff() < 0.0);
}

TEST_CASE("log density of the standard normal") {
  auto g1 = GmmOracle::single(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
  Tensor zero1 = Tensor::Zero(1, 1);
  CHECK(gmm_log_density(g1, zero1)(0) ==
        doctest::Approx(-0.9189385332046727).epsilon(1e-15));

  auto g2 = GmmOracle::single(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  Tensor zero2 = Tensor::Zero(2, 1);
  CHECK(gmm_log_density(g2, zero2)(0) ==
        doctest::Approx(-1.8378770664093453).epsilon(1e-15));

  // two-component density from first principles
  auto two = GmmOracle::two_mode(1.0, 0.2);
  Tensor x = Tensor::Constant(1, 1, 0.3);
  auto comp = [](double v, double mu, double sd) {
    return std::exp(-0.5 * std::pow((v - mu) / sd, 2)) / (sd * std::sqrt(2 * M_PI));
  };
  double expect = std::log(0.5 * comp(0.3, -1, 0.2) + 0.5 * comp(0.3, 1, 0.2));
  CHECK(gmm_log_density(two, x)(0) == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("scores of simple mixtures have closed forms") {
  auto g = GmmOracle::single(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  Tensor x = rng::normal_matrix(2, 6, 21, rng::kData, 0);
  CHECK((gmm_score(g, x) + x).cwiseAbs().maxCoeff() < 1e-14);

  auto two = GmmOracle::two_mode(1.0, 0.2);
  Tensor origin = Tensor::Zero(1, 1);
  CHECK(std::abs(gmm_score(two, origin)(0, 0)) < 1e-12);
}

TEST_CASE("score equals the gradient of the log density") {
  auto ring = GmmOracle::ring(8, 2.0, 0.1);
  auto vp = build_vp_schedule(1000, 1e-4, 0.02);
  rng::Stream ts(99, rng::kTime, 0, 0);
  double h = 1e-5;
  for (int trial = 0; trial < 1000; ++trial) {
    int t = static_cast<int>(ts.uniform_int(0, 1000));
    auto diffused = diffused_gmm(ring, vp, t);
    Tensor x = 2.5 * rng::normal_matrix(2, 1, 55, rng::kData, trial);
    Tensor s = diffused_score(ring, x, t, vp);
    for (int r = 0; r < 2; ++r) {
      Tensor hi = x, lo = x;
      hi(r, 0) += h;
      lo(r, 0) -= h;
      double fd = (gmm_log_density(diffused, hi)(0) - gmm_log_density(diffused, lo)(0)) / (2 * h);
      CHECK(std::abs(s(r, 0) - fd) / std::max(1.0, std::abs(fd)) < 1e-5);
    }
  }
}

TEST_CASE("unit-variance data keeps score -x under the preserving schedule") {
  auto g = GmmOracle::single(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  auto vp = build_vp_schedule(1000, 1e-4, 0.02);
  Tensor x = rng::normal_matrix(2, 4, 77, rng::kData, 0);
  for (int t : {0, 250, 1000}) {
    CHECK((diffused_score(g, x, t, vp) + x).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("posterior clean-state mean obeys Tweedie's identity") {
  auto ring = GmmOracle::ring(8, 2.0, 0.1);
  rng::Stream ts(31, rng::kTime, 1, 0);
  for (int trial = 0; trial < 200; ++trial) {
    double a = 0.1 + 0.85 * ts.uniform();
    double b = 0.1 + 1.5 * ts.uniform();
    Tensor x_t = 2.0 * rng::normal_matrix(2, 3, 61, rng::kData, trial);
    Tensor pm = gmm_posterior_mean_x0(ring, x_t, a, b);
    Tensor score = gmm_score(ring.diffused(a, b), x_t);
    Tensor tweedie = (x_t + b * b * score) / a;
    CHECK((pm - tweedie).cwiseAbs().maxCoeff() < 1e-10);
  }
  Tensor x = Tensor::Constant(2, 1, 1.0);
  CHECK((gmm_posterior_mean_x0(ring, x, 0.5, 0.0) - Tensor(x / 0.5)).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(gmm_posterior_mean_x0(ring, x, 0.0, 0.0), std::invalid_argument);
}

TEST_CASE("swiss roll generator") {
  Tensor roll = swiss_roll(512, 4);
  CHECK(roll.rows() == 2);
  CHECK(roll.cols() == 512);
  CHECK(roll.cwiseAbs().maxCoeff() < 3.0);
  CHECK(swiss_roll(64, 4) == swiss_roll(64, 4));
  CHECK(swiss_roll(64, 4) != swiss_roll(64, 5));
  CHECK_THROWS_AS(swiss_roll(0, 1), std::invalid_argument);
}

TEST_CASE("energy distance separates distributions") {
  auto g = GmmOracle::single(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  Tensor a = sample_gmm(g, 800, 1);
  Tensor b = sample_gmm(g, 800, 2);
  auto shifted_g = GmmOracle::single(Eigen::VectorXd::Constant(2, 3.0),
                                     Eigen::MatrixXd::Identity(2, 2));
  Tensor c = sample_gmm(shifted_g, 800, 3);
  double same = energy_distance(a, b);
  double apart = energy_distance(a, c);
  CHECK(std::abs(same) < 0.1);
  CHECK(apart > 1.0);
  CHECK_THROWS_AS(energy_distance(a, Tensor(2, 0)), std::invalid_argument);
}

TEST_CASE("oracle draws pass a permutation check of the energy distance") {
  auto two = GmmOracle::two_mode(1.0, 0.2);
  int n = 400;
  Tensor a = sample_gmm(two, n, 11);
  Tensor b = sample_gmm(two, n, 111);
  double observed = energy_distance(a, b);

  // pool and re-split; the observed statistic should not be an outlier
  Tensor pool(1, 2 * n);
  pool << a, b;
  int exceed = 0;
  const int perms = 19;
  for (int p = 0; p < perms; ++p) {
    rng::Stream st(100 + p, rng::kMetrics, 7, 0);
    std::vector<int> idx(2 * n);
    for (int i = 0; i < 2 * n; ++i) idx[i] = i;
    for (int i = 2 * n - 1; i > 0; --i)
      std::swap(idx[i], idx[st.uniform_int(0, i)]);
    Tensor pa(1, n), pb(1, n);
    for (int i = 0; i < n; ++i) {
      pa.col(i) = pool.col(idx[i]);
      pb.col(i) = pool.col(idx[n + i]);
    }
    if (energy_distance(pa, pb) >= observed) ++exceed;
  }
  CHECK(exceed >= 1);  // below the permutation 95th percentile
}

TEST_CASE("metric report on degenerate input") {
  auto g = GmmOracle::single(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2));
  Tensor zeros = Tensor::Zero(2, 100);
  auto r = distribution_metrics(zeros, g, 500, 1);
  CHECK(r.mean_error == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.cov_error == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  CHECK(r.n_samples == 100);
  CHECK(r.n_reference == 500);
  CHECK(r.mode_mass(0) == 1.0);  // origin sits inside the single mode
  CHECK(r.unassigned_mass == 0.0);

  auto again = distribution_metrics(zeros, g, 500, 1);
  CHECK(again.energy_distance == r.energy_distance);
  CHECK(again.mean_error == r.mean_error);

  CHECK_THROWS_AS(distribution_metrics(Tensor(2, 0), g, 10, 1), std::invalid_argument);
}

TEST_CASE("metric report on faithful samples") {
  auto ring = GmmOracle::ring(8, 2.0, 0.1);
  Tensor s = sample_gmm(ring, 4000, 17);
  auto r = distribution_metrics(s, ring, 4000, 17);
  CHECK(r.mean_error < 0.05);
  CHECK(r.cov_error < 0.1);
  CHECK(std::abs(r.energy_distance) < 0.05);
  CHECK(r.mode_mass.sum() + r.unassigned_mass == doctest::Approx(1.0).epsilon(1e-12));
  for (int i = 0; i < 8; ++i) CHECK(std::abs(r.mode_mass(i) - 0.125) < 0.03);
  CHECK(r.unassigned_mass < 0.02);

  // far-away junk is reported as unassigned, not silently bucketed
  Tensor junk = Tensor::Constant(2, 50, 25.0);
  auto rj = distribution_metrics(junk, ring, 200, 3);
  CHECK(rj.unassigned_mass == 1.0);

  auto vs_reference = distribution_metrics(s, sample_gmm(ring, 4000, 23));
  CHECK(vs_reference.mean_error < 0.1);
  CHECK(std::abs(vs_reference.energy_distance) < 0.05);
}

}  // TEST_SUITE
