#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "dlab/rng.hpp"
#include "dlab/samplers.hpp"
#include "dlab/toyworld.hpp"

using namespace dlab;

namespace {

Denoiser constant_denoiser(Pred kind, int dim, double value) {
  Denoiser d;
  d.kind = kind;
  d.data_dim = dim;
  d.eval = [value](const Tensor& x, const Eigen::VectorXd&, const Tensor*) {
    return Tensor(Tensor::Constant(x.rows(), x.cols(), value));
  };
  return d;
}

// exact noise estimate for the diffused mixture: eps = -sqrt(1-abar) * score
Denoiser oracle_eps_denoiser(const GmmOracle& g, const VpDiscreteSchedule& s) {
  Denoiser d;
  d.kind = Pred::kEps;
  d.data_dim = g.dim();
  d.eval = [&g, &s](const Tensor& x, const Eigen::VectorXd& t, const Tensor*) {
    Tensor out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      int tj = static_cast<int>(std::lround(t(j)));
      double b = std::sqrt(s.one_minus_abar(tj));
      out.col(j) = -b * diffused_score(g, Tensor(x.col(j)), tj, s);
    }
    return out;
  };
  return d;
}

double sample_variance(const Tensor& x) {
  return x.array().square().mean() - std::pow(x.mean(), 2);
}

// probability-flow endpoint map under the variance-exploding path, Heun on a
// geometric time grid; this is the function a consistency model approximates
Tensor ode_endpoint(const GmmOracle& g, const VeSchedule& ve, Tensor x, double t_hi) {
  const int K = 80;
  const double t_lo = ve.epsilon_min;
  if (t_hi <= t_lo) return x;
  for (int k = 0; k < K; ++k) {
    double t0 = t_hi * std::pow(t_lo / t_hi, static_cast<double>(k) / K);
    double t1 = t_hi * std::pow(t_lo / t_hi, static_cast<double>(k + 1) / K);
    Tensor d0 = -t0 * diffused_score(g, x, t0, ve);
    Tensor mid = x + (t1 - t0) * d0;
    Tensor d1 = -t1 * diffused_score(g, mid, t1, ve);
    x += 0.5 * (t1 - t0) * (d0 + d1);
  }
  return x;
}

}  // namespace

TEST_SUITE("samplers") {

TEST_CASE("timestep grids") {
  CHECK(full_range_taus(5) == std::vector<int>{0, 1, 2, 3, 4, 5});
  auto taus = uniform_taus(1000, 50);
  REQUIRE(taus.size() == 51);
  CHECK(taus.front() == 0);
  CHECK(taus.back() == 1000);
  for (std::size_t i = 1; i < taus.size(); ++i) CHECK(taus[i] > taus[i - 1]);
  CHECK(uniform_taus(10, 10) == full_range_taus(10));
  CHECK_THROWS_AS(uniform_taus(10, 0), std::invalid_argument);
  CHECK_THROWS_AS(uniform_taus(10, 11), std::invalid_argument);

  auto times = uniform_trig_times(4);
  REQUIRE(times.size() == 5);
  CHECK(times.front() == doctest::Approx(M_PI / 2).epsilon(1e-15));
  CHECK(times.back() == 0.0);
  for (std::size_t i = 1; i < times.size(); ++i) CHECK(times[i] < times[i - 1]);
  CHECK_THROWS_AS(uniform_trig_times(0), std::invalid_argument);
}

TEST_CASE("guidance-weighted prediction") {
  Denoiser d;
  d.kind = Pred::kEps;
  d.data_dim = 1;
  d.cond_dim = 1;
  d.eval = [](const Tensor& x, const Eigen::VectorXd&, const Tensor* cond) {
    double v = (cond != nullptr && cond->size() > 0) ? 1.0 : 0.5;
    return Tensor(Tensor::Constant(x.rows(), x.cols(), v));
  };
  Tensor x = Tensor::Zero(1, 3);
  Tensor cond = Tensor::Ones(1, 3);

  auto p0 = cfg_predict(d, x, 10.0, &cond, 0.0);
  CHECK(p0.value == Tensor::Constant(1, 3, 1.0));
  CHECK(p0.kind == Pred::kEps);
  CHECK(p0.anchor == x);
  CHECK(p0.t(0) == 10.0);

  auto p2 = cfg_predict(d, x, 10.0, &cond, 2.0);
  CHECK(p2.value == Tensor::Constant(1, 3, 2.0));

  // zero guidance gap: output independent of w
  Denoiser flat = d;
  flat.eval = [](const Tensor& x_, const Eigen::VectorXd&, const Tensor*) {
    return Tensor(Tensor::Constant(x_.rows(), x_.cols(), 0.7));
  };
  CHECK(cfg_predict(flat, x, 10.0, &cond, 5.0).value ==
        cfg_predict(flat, x, 10.0, &cond, 0.0).value);

  Denoiser uncond = constant_denoiser(Pred::kEps, 1, 0.3);
  CHECK_THROWS_AS(cfg_predict(uncond, x, 10.0, nullptr, 1.0), std::invalid_argument);
  CHECK(cfg_predict(uncond, x, 10.0, nullptr, 0.0).value == Tensor::Constant(1, 3, 0.3));
}

TEST_CASE("single-step ancestral sampling collapses to the clean estimate") {
  auto s = build_vp_schedule(1, 0.75, 0.75);  // abar(1) = 0.25
  auto model = constant_denoiser(Pred::kEps, 2, 0.4);
  SamplerConfig cfg;
  cfg.seed = 3;
  cfg.batch = 5;
  auto traj = ddpm_sample(model, s, cfg);

  Tensor x_T = traj.states.front();
  Tensor expect = (x_T.array() - std::sqrt(0.75) * 0.4) / 0.5;
  CHECK((traj.final - expect.matrix()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(!traj.probabilistic());
  CHECK(traj.times == std::vector<double>{1.0, 0.0});

  auto again = ddpm_sample(model, s, cfg);
  CHECK(again.final == traj.final);
}

TEST_CASE("ancestral sampler bookkeeping and validation") {
  auto s = build_vp_schedule(10, 1e-4, 0.02);
  auto model = constant_denoiser(Pred::kEps, 1, 0.0);
  SamplerConfig cfg;
  cfg.seed = 1;
  cfg.batch = 3;
  auto traj = ddpm_sample(model, s, cfg);
  REQUIRE(traj.states.size() == 11);
  CHECK(traj.times.front() == 10.0);
  CHECK(traj.times.back() == 0.0);
  CHECK(traj.final == traj.states.back());
  CHECK(traj.step_log_probs.size() == 9);  // every noisy transition, t=1 excluded
  CHECK(traj.probabilistic());
  CHECK(traj.total_log_prob().size() == 3);

  SamplerConfig sub = cfg;
  sub.taus = {0, 5, 10};
  CHECK_THROWS_AS(ddpm_sample(model, s, sub), std::invalid_argument);

  auto simplified = ddpm_sample(model, s, cfg, DdpmVariant::kSimplified);
  CHECK(!simplified.probabilistic());
  CHECK(simplified.states.size() == 11);
}

TEST_CASE("recorded transition densities match direct evaluation") {
  auto s = build_vp_schedule(4, 0.05, 0.3);
  auto g = GmmOracle::two_mode(1.0, 0.3);
  auto model = oracle_eps_denoiser(g, s);
  SamplerConfig cfg;
  cfg.seed = 11;
  cfg.batch = 2;
  auto traj = ddpm_sample(model, s, cfg);
  REQUIRE(traj.step_log_probs.size() == 3);

  constexpr double kLog2Pi = 1.8378770664093453;
  for (int n = 0; n < 3; ++n) {
    int t = 4 - n;  // transition t -> t-1
    const Tensor& x_cur = traj.states[n];
    const Tensor& x_next = traj.states[n + 1];
    Eigen::VectorXd tv = Eigen::VectorXd::Constant(2, static_cast<double>(t));
    Tensor eps_hat = model(x_cur, tv);
    Tensor x0_hat = (x_cur - std::sqrt(1.0 - s.abar(t)) * eps_hat) / std::sqrt(s.abar(t));
    double ab_p = s.abar(t - 1);
    Tensor mean = (std::sqrt(ab_p) * (1.0 - s.alpha_at(t)) * x0_hat +
                   std::sqrt(s.alpha_at(t)) * (1.0 - ab_p) * x_cur) /
                  (1.0 - s.abar(t));
    double var = (1.0 - s.alpha_at(t)) * (1.0 - ab_p) / (1.0 - s.abar(t));
    for (int j = 0; j < 2; ++j) {
      double lp = -0.5 * std::pow(x_next(0, j) - mean(0, j), 2) / var -
                  0.5 * (kLog2Pi + std::log(var));
      CHECK(std::abs(traj.step_log_probs[n](j) - lp) /
                std::max(1.0, std::abs(lp)) < 1e-8);
    }
  }
}

TEST_CASE("ancestral chain reproduces a unit normal") {
  auto s = build_vp_schedule(200, 1e-4, 0.02);
  auto g = GmmOracle::single(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1));
  Denoiser model;
  model.kind = Pred::kEps;
  model.data_dim = 1;
  model.eval = [&s](const Tensor& x, const Eigen::VectorXd& t, const Tensor*) {
    // unit-variance data: score is -x at every diffusion time
    Tensor out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      out.col(j) = std::sqrt(s.one_minus_abar(static_cast<int>(t(j)))) * x.col(j);
    return out;
  };
  SamplerConfig cfg;
  cfg.seed = 21;
  cfg.batch = 10000;
  auto traj = ddpm_sample(model, s, cfg);
  double se_mean = 1.0 / std::sqrt(10000.0);
  CHECK(std::abs(traj.final.mean()) < 3 * se_mean);
  CHECK(std::abs(sample_variance(traj.final) - 1.0) < 3 * std::sqrt(2.0 / 10000.0));
  (void)g;
}

TEST_CASE("one-jump deterministic sampling is the Tweedie estimate") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  auto model = constant_denoiser(Pred::kEps, 2, 0.7);
  SamplerConfig cfg;
  cfg.seed = 5;
  cfg.batch = 4;
  cfg.taus = {0, 100};
  auto traj = ddim_sample(model, s, cfg);
  Tensor x_T = traj.states.front();
  double a = std::sqrt(s.abar(100)), b = std::sqrt(1.0 - s.abar(100));
  Tensor expect = (x_T.array() - b * 0.7) / a;
  CHECK((traj.final - expect.matrix()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(!traj.probabilistic());
  CHECK(ddim_sample(model, s, cfg).final == traj.final);
}

TEST_CASE("deterministic subsequence sampling validates its grid") {
  auto s = build_vp_schedule(20, 1e-4, 0.02);
  auto model = constant_denoiser(Pred::kEps, 1, 0.0);
  SamplerConfig cfg;
  cfg.taus = {1, 10, 20};
  CHECK_THROWS_AS(ddim_sample(model, s, cfg), std::invalid_argument);
  cfg.taus = {0, 10, 19};
  CHECK_THROWS_AS(ddim_sample(model, s, cfg), std::invalid_argument);
  cfg.taus = {0, 10, 10, 20};
  CHECK_THROWS_AS(ddim_sample(model, s, cfg), std::invalid_argument);
  cfg.taus = {20};
  CHECK_THROWS_AS(ddim_sample(model, s, cfg), std::invalid_argument);

  cfg.taus = {0, 7, 20};
  cfg.eta = 1.0;
  auto traj = ddim_sample(model, s, cfg);
  CHECK(traj.step_log_probs.size() == 1);  // final jump into 0 is noiseless
}

TEST_CASE("stochastic subsequence sampling matches the ancestral chain") {
  auto s = build_vp_schedule(50, 1e-4, 0.02);
  auto g = GmmOracle::two_mode(1.0, 0.2);
  auto model = oracle_eps_denoiser(g, s);
  SamplerConfig cfg;
  cfg.seed = 17;
  cfg.batch = 4;
  cfg.eta = 1.0;
  auto ddim = ddim_sample(model, s, cfg);
  auto ddpm = ddpm_sample(model, s, cfg);
  REQUIRE(ddim.states.size() == ddpm.states.size());
  for (std::size_t i = 0; i < ddim.states.size(); ++i)
    CHECK((ddim.states[i] - ddpm.states[i]).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("langevin updates") {
  SamplerConfig cfg;
  cfg.seed = 7;
  cfg.batch = 10000;

  // zero drift: variance grows linearly with accumulated step noise
  auto zero_score = [](const Tensor& x) { return Tensor(Tensor::Zero(x.rows(), x.cols())); };
  Tensor walk = smld_langevin_sample(zero_score, 0.1, 10, 1, cfg);
  CHECK(std::abs(sample_variance(walk) - 2.0) < 3 * 2.0 * std::sqrt(2.0 / 10000.0));

  // standard-normal score: stationary variance within 5% of 1
  auto normal_score = [](const Tensor& x) { return Tensor(-x); };
  Tensor eq = smld_langevin_sample(normal_score, 0.1, 1000, 1, cfg);
  CHECK(std::abs(sample_variance(eq) - 1.0) < 0.05);

  CHECK_THROWS_AS(smld_langevin_sample(zero_score, 0.0, 10, 1, cfg), std::invalid_argument);
  auto bad_score = [](const Tensor& x) {
    return Tensor(Tensor::Constant(x.rows(), x.cols(), std::nan("")));
  };
  CHECK_THROWS_AS(smld_langevin_sample(bad_score, 0.1, 2, 1, cfg), std::runtime_error);
}

TEST_CASE("langevin occupies both modes of a bimodal target") {
  auto g = GmmOracle::two_mode(1.0, 0.2);
  auto score = [&g](const Tensor& x) { return gmm_score(g, x); };
  SamplerConfig cfg;
  cfg.seed = 13;
  cfg.batch = 500;
  Tensor out = smld_langevin_sample(score, 0.01, 1500, 1, cfg);
  int left = 0, right = 0;
  for (int j = 0; j < 500; ++j) (out(0, j) < 0 ? left : right)++;
  CHECK(left > 50);
  CHECK(right > 50);
}

TEST_CASE("consistency multistep sampling") {
  VeSchedule ve;
  SamplerConfig cfg;
  cfg.seed = 19;
  cfg.batch = 6;

  // single call: no re-noising, output is f at the top noise level
  Denoiser fmap = constant_denoiser(Pred::kFCons, 2, 1.25);
  auto traj = cm_multistep_sample(fmap, ve, 1, cfg);
  CHECK(traj.final == Tensor::Constant(2, 6, 1.25));
  CHECK(traj.times.front() == 80.0);
  CHECK(traj.times.back() == 0.0);

  // re-noising at the left boundary adds exactly nothing
  auto two_step = cm_multistep_sample(fmap, ve, 2, cfg);
  REQUIRE(two_step.states.size() == 3);
  CHECK(two_step.states[1] == Tensor::Constant(2, 6, 1.25));

  Denoiser eps_kind = constant_denoiser(Pred::kEps, 2, 0.0);
  CHECK_THROWS_AS(cm_multistep_sample(eps_kind, ve, 2, cfg), std::invalid_argument);

  // ideal flow-endpoint map: multistep re-noising keeps the target moments
  auto ring = GmmOracle::ring(8, 2.0, 0.1);
  Denoiser oracle_f;
  oracle_f.kind = Pred::kFCons;
  oracle_f.data_dim = 2;
  oracle_f.eval = [&ring, &ve](const Tensor& x, const Eigen::VectorXd& t, const Tensor*) {
    return ode_endpoint(ring, ve, x, t(0));
  };
  SamplerConfig big = cfg;
  big.batch = 2000;
  auto run = cm_multistep_sample(oracle_f, ve, 4, big);
  auto report = distribution_metrics(run.final, ring, 2000, 1);
  CHECK(report.mean_error < 0.1);
  CHECK(report.cov_error < 0.3);
}

TEST_CASE("renoising sampler with the model noise override is deterministic subsequence sampling") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  auto g = GmmOracle::two_mode(1.0, 0.2);
  auto model = oracle_eps_denoiser(g, s);
  SamplerConfig cfg;
  cfg.seed = 23;
  cfg.batch = 3;
  cfg.taus = uniform_taus(100, 5);

  auto ddim = ddim_sample(model, s, cfg);
  std::map<int, Tensor> state_at;
  for (std::size_t i = 0; i < ddim.times.size(); ++i)
    state_at[static_cast<int>(ddim.times[i])] = ddim.states[i];

  NoiseFn own_eps = [&](int t_cur, Eigen::Index rows, Eigen::Index cols) {
    Tensor x = state_at.at(t_cur);
    REQUIRE(x.rows() == rows);
    REQUIRE(x.cols() == cols);
    return model(x, static_cast<double>(t_cur));
  };
  auto lcm = lcm_sample(model, s, cfg, own_eps);
  REQUIRE(lcm.states.size() == ddim.states.size());
  for (std::size_t i = 0; i < lcm.states.size(); ++i)
    CHECK((lcm.states[i] - ddim.states[i]).cwiseAbs().maxCoeff() < 1e-10);

  // fresh-noise runs differ from the deterministic path but stay seeded
  auto fresh = lcm_sample(model, s, cfg);
  CHECK((fresh.final - ddim.final).cwiseAbs().maxCoeff() > 1e-8);
  CHECK(lcm_sample(model, s, cfg).final == fresh.final);

  SamplerConfig one = cfg;
  one.taus = {0, 100};
  auto single = lcm_sample(model, s, one);
  Tensor x_T = single.states.front();
  Eigen::VectorXd tv = Eigen::VectorXd::Constant(3, 100.0);
  Tensor eps_hat = model(x_T, tv);
  Tensor tweedie =
      (x_T - std::sqrt(1.0 - s.abar(100)) * eps_hat) / std::sqrt(s.abar(100));
  CHECK((single.final - tweedie).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rescaled-trajectory sampler recovers the target from ideal velocities") {
  auto s = build_vp_schedule(60, 1e-4, 0.02);
  Tensor x0_star = Tensor::Constant(2, 1, 0.0);  // filled per column below

  // velocity oracle for a pinned clean target: recover eps from the state
  Tensor target(2, 4);
  target << 1.0, -0.5, 2.0, 0.3, -1.0, 0.25, 0.0, 1.5;
  Denoiser v_oracle;
  v_oracle.kind = Pred::kVRf;
  v_oracle.data_dim = 2;
  v_oracle.eval = [&s, &target](const Tensor& y, const Eigen::VectorXd& t, const Tensor*) {
    Tensor out(y.rows(), y.cols());
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      int tj = static_cast<int>(std::lround(t(j)));
      double a = s.a(tj), b = std::sqrt(1.0 - s.abar(tj));
      Tensor x_t = (a + b) * y.col(j);
      Tensor eps = (x_t - a * target.col(j)) / std::max(b, 1e-12);
      out.col(j) = target.col(j) - eps;
    }
    return out;
  };

  SamplerConfig cfg;
  cfg.seed = 29;
  cfg.batch = 4;
  cfg.taus = {0, 60};
  auto traj = instaflow_sample(v_oracle, s, cfg, InstaFlowVariant::kDdim);
  CHECK((traj.final - target).cwiseAbs().maxCoeff() < 1e-10);
  (void)x0_star;
}

TEST_CASE("rescaled-trajectory sampler variants and bookkeeping") {
  auto s = build_vp_schedule(1000, 1e-4, 0.02);

  // ideal velocity for unit-normal data: v = (a - b) x_t = (a - b) beta y
  Denoiser v_normal;
  v_normal.kind = Pred::kVRf;
  v_normal.data_dim = 1;
  v_normal.eval = [&s](const Tensor& y, const Eigen::VectorXd& t, const Tensor*) {
    Tensor out(y.rows(), y.cols());
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      int tj = static_cast<int>(std::lround(t(j)));
      double a = s.a(tj), b = std::sqrt(1.0 - s.abar(tj));
      out.col(j) = (a - b) * (a + b) * y.col(j);
    }
    return out;
  };

  SamplerConfig cfg;
  cfg.seed = 31;
  cfg.batch = 10000;
  auto full = instaflow_sample(v_normal, s, cfg, InstaFlowVariant::kFull);
  auto simpl = instaflow_sample(v_normal, s, cfg, InstaFlowVariant::kSimplified);
  CHECK(full.probabilistic());
  CHECK(!simpl.probabilistic());
  CHECK(simpl.states.size() == full.states.size());

  // exact transition densities keep the unit-normal target
  CHECK(std::abs(full.final.mean()) < 3.5 / std::sqrt(10000.0));
  CHECK(std::abs(sample_variance(full.final) - 1.0) < 0.05);

  // states live in sample space: the start is beta_T * y_init
  double beta_T = s.a(1000) + std::sqrt(1.0 - s.abar(1000));
  Tensor y0 = rng::normal_matrix(1, cfg.batch, cfg.seed, rng::kInit, 0);
  CHECK((full.states.front() - beta_T * y0).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(instaflow_sample(v_normal, s, cfg, InstaFlowVariant::kSimplified).final == simpl.final);

  SamplerConfig sub = cfg;
  sub.taus = {0, 500, 1000};
  CHECK_THROWS_AS(instaflow_sample(v_normal, s, sub, InstaFlowVariant::kFull),
                  std::invalid_argument);
  CHECK_THROWS_AS(instaflow_sample(v_normal, s, sub, InstaFlowVariant::kSimplified),
                  std::invalid_argument);
  auto v_bad = constant_denoiser(Pred::kEps, 1, 0.0);
  CHECK_THROWS_AS(instaflow_sample(v_bad, s, cfg, InstaFlowVariant::kFull),
                  std::invalid_argument);
}

TEST_CASE("euler flow integration") {
  RfSchedule rf;
  SamplerConfig cfg;
  cfg.seed = 37;
  cfg.batch = 5;

  auto still = constant_denoiser(Pred::kVRf, 2, 0.0);
  Tensor init = rng::normal_matrix(2, 5, 37, rng::kInit, 0);
  CHECK(rf_euler_sample(still, rf, 4, cfg) == init);

  // straight field toward a fixed target integrates exactly in one step
  Tensor target = Tensor::Constant(2, 5, 0.8);
  Denoiser straight;
  straight.kind = Pred::kVRf;
  straight.data_dim = 2;
  straight.eval = [&target](const Tensor& y, const Eigen::VectorXd&, const Tensor*) {
    return Tensor(target - y);
  };
  Tensor out = rf_euler_sample(straight, rf, 1, cfg);
  CHECK((out - target).cwiseAbs().maxCoeff() < 1e-14);

  CHECK_THROWS_AS(rf_euler_sample(still, rf, 0, cfg), std::invalid_argument);
  CHECK(rf_euler_sample(straight, rf, 7, cfg) == rf_euler_sample(straight, rf, 7, cfg));
}

TEST_CASE("angular sampler") {
  TrigSchedule trig;
  SamplerConfig cfg;
  cfg.seed = 41;
  cfg.batch = 3;

  // a repeated time is the identity update
  auto anything = constant_denoiser(Pred::kVTrig, 2, 0.9);
  Tensor init = trig.sigma_data * rng::normal_matrix(2, 3, 41, rng::kInit, 0);
  Tensor held = trigflow_sample(anything, trig, {M_PI / 2, M_PI / 2}, cfg);
  CHECK((held - init).cwiseAbs().maxCoeff() < 1e-15);

  // ideal velocity for a pinned clean target: single step recovers it
  Tensor target(2, 3);
  target << 0.4, -1.2, 0.0, 1.1, 0.6, -0.3;
  Denoiser v_oracle;
  v_oracle.kind = Pred::kVTrig;
  v_oracle.data_dim = 2;
  v_oracle.eval = [&trig, &target](const Tensor& x, const Eigen::VectorXd& t, const Tensor*) {
    Tensor out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      double c = std::cos(t(j)), sn = std::sin(t(j));
      Tensor z = (x.col(j) - c * target.col(j)) / std::max(sn, 1e-12);
      out.col(j) = c * z - sn * target.col(j);
    }
    return out;
  };
  Tensor one_step = trigflow_sample(v_oracle, trig, {M_PI / 2, 0.0}, cfg);
  CHECK((one_step - target).cwiseAbs().maxCoeff() < 1e-10);

  CHECK_THROWS_AS(trigflow_sample(anything, trig, {M_PI / 2}, cfg), std::invalid_argument);
  CHECK_THROWS_AS(trigflow_sample(anything, trig, {1.0, 0.0}, cfg), std::invalid_argument);
  CHECK_THROWS_AS(trigflow_sample(anything, trig, {M_PI / 2, 0.2, 0.4}, cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(trigflow_sample(anything, trig, {M_PI / 2, -0.1}, cfg), std::invalid_argument);
}

TEST_CASE("chunked batches reproduce the unchunked run") {
  auto s = build_vp_schedule(30, 1e-4, 0.02);
  auto g = GmmOracle::two_mode(1.0, 0.2);
  auto model = oracle_eps_denoiser(g, s);
  SamplerConfig whole;
  whole.seed = 43;
  whole.batch = 8;
  whole.eta = 1.0;
  auto full = ddim_sample(model, s, whole);

  Tensor stitched(1, 8);
  for (int lo = 0; lo < 8; lo += 4) {
    SamplerConfig chunk = whole;
    chunk.batch = 4;
    chunk.base_index = lo;
    stitched.middleCols(lo, 4) = ddim_sample(model, s, chunk).final;
  }
  CHECK(stitched == full.final);
}

}  // TEST_SUITE
