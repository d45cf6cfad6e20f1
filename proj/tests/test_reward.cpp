#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "dlab/distillation.hpp"
#include "dlab/parameterizations.hpp"
#include "dlab/reward.hpp"
#include "dlab/rng.hpp"
#include "dlab/samplers.hpp"
#include "dlab/toyworld.hpp"

using namespace dlab;

namespace {

ModelSpec tiny_spec(Pred head, int data_dim = 1, std::uint64_t seed = 99) {
  ModelSpec spec;
  spec.data_dim = data_dim;
  spec.hidden = {6};
  spec.time_freqs = 2;
  spec.head = head;
  spec.t_hi = 100.0;
  spec.init_seed = seed;
  return spec;
}

void zero_params(DenoiserModel& m) {
  for (Tensor* p : m.params()) p->setZero();
  m.copy_weights_to_ema();
}

double noise_coef(const VpDiscreteSchedule& s, int t) {
  return t == 0 ? 0.0 : std::sqrt(s.one_minus_abar(t));
}

/// One deterministic reverse step, the same update the rollout methods take.
Tensor ddim_step(const Denoiser& den, const VpDiscreteSchedule& s, const Tensor& x, int cur,
                 int prev) {
  Eigen::VectorXd t = Eigen::VectorXd::Constant(x.cols(), static_cast<double>(cur));
  X0EpsPair p = to_x0_eps(Prediction{den.kind, den(x, t), x, t}, s, true);
  return s.a(prev) * p.x0 + noise_coef(s, prev) * p.eps;
}

X0EpsPair plain_pair(const Denoiser& den, const VpDiscreteSchedule& s, const Tensor& x,
                     const Eigen::VectorXd& t) {
  return to_x0_eps(Prediction{den.kind, den(x, t), x, t}, s, true);
}

constexpr double kLog2Pi = 1.8378770664093454836;

/// Plain-valued surrogate of the score-function objective on a recorded
/// trajectory, used both as a hand check and as the FD closure.
double ddpo_value(const DenoiserModel& model, const RewardModel& reward,
                  const VpDiscreteSchedule& s, const Trajectory& traj, bool mean_baseline) {
  Denoiser den = as_denoiser(model);
  const Eigen::Index n = traj.final.cols();
  const double d = static_cast<double>(traj.final.rows());
  Eigen::RowVectorXd advantage = reward.value(traj.final);
  if (mean_baseline) advantage.array() -= advantage.mean();

  Eigen::RowVectorXd total = Eigen::RowVectorXd::Zero(n);
  bool any = false;
  for (std::size_t i = 0; i + 1 < traj.times.size(); ++i) {
    int cur = static_cast<int>(std::lround(traj.times[i]));
    int prev = static_cast<int>(std::lround(traj.times[i + 1]));
    if (prev == 0) continue;
    double ab_c = s.abar(cur), ab_p = s.abar(prev);
    double sig = std::sqrt((1.0 - ab_p) / (1.0 - ab_c)) * std::sqrt(1.0 - ab_c / ab_p);
    if (sig <= 0.0) continue;
    double dir = std::sqrt(std::max(1.0 - ab_p - sig * sig, 0.0));

    Eigen::VectorXd tvec = Eigen::VectorXd::Constant(n, static_cast<double>(cur));
    X0EpsPair p = plain_pair(den, s, traj.states[i], tvec);
    Tensor mean = std::sqrt(ab_p) * p.x0 + dir * p.eps;
    Eigen::RowVectorXd sq = (traj.states[i + 1] - mean).colwise().squaredNorm();
    total += (-0.5 / (sig * sig)) * sq;
    total.array() += -0.5 * d * (kLog2Pi + 2.0 * std::log(sig));
    any = true;
  }
  REQUIRE(any);
  return -(total.cwiseProduct(advantage)).mean();
}

}  // namespace

TEST_SUITE("reward") {

TEST_CASE("squared-distance and coordinate rewards") {
  Eigen::VectorXd target(2);
  target << 0.5, -1.0;
  RewardModel r = reward_neg_sq_dist(target);
  CHECK(r.differentiable);
  CHECK_FALSE(r.has_diffused());

  Tensor x(2, 3);
  x << 0.5, 1.5, -0.2, -1.0, 0.0, 2.0;
  Eigen::RowVectorXd v = r.value(x);
  Tensor g = r.grad(x);
  for (int j = 0; j < 3; ++j) {
    CHECK(v(j) == doctest::Approx(-(x.col(j) - target).squaredNorm()).epsilon(1e-14));
    CHECK((g.col(j) + 2.0 * (x.col(j) - target)).norm() < 1e-14);
  }

  RewardModel c = reward_coordinate(1);
  CHECK(c.value(x) == Eigen::RowVectorXd(x.row(1)));
  Tensor gc = c.grad(x);
  CHECK(gc.row(0).norm() == 0.0);
  CHECK(gc.row(1) == Eigen::RowVectorXd::Ones(3));

  CHECK_THROWS_AS(reward_coordinate(-1), std::invalid_argument);
  RewardModel far = reward_coordinate(5);
  CHECK_THROWS_AS(far.value(x), std::invalid_argument);
  CHECK_THROWS_AS(far.grad(x), std::invalid_argument);
}

TEST_CASE("mixture log-density reward exposes the diffused pair") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  GmmOracle g = GmmOracle::two_mode(1.0, 0.3);
  RewardModel r = reward_gmm_log_density(g, s);
  CHECK(r.differentiable);
  CHECK(r.has_diffused());

  Tensor x = rng::normal_matrix(1, 5, 3, rng::kData, 0);
  CHECK((r.value(x) - gmm_log_density(g, x)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((r.grad(x) - gmm_score(g, x)).cwiseAbs().maxCoeff() < 1e-14);

  GmmOracle gt = diffused_gmm(g, s, 40);
  CHECK((r.value_t(x, 40) - gmm_log_density(gt, x)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK((r.grad_t(x, 40) - gmm_score(gt, x)).cwiseAbs().maxCoeff() < 1e-14);
  // second lookup hits the cache and must agree
  CHECK(r.grad_t(x, 40) == r.grad_t(x, 40));
}

TEST_CASE("one-step reward backprop at a fixed cut") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  DenoiserModel model(tiny_spec(Pred::kEps));
  zero_params(model);
  Eigen::VectorXd target = Eigen::VectorXd::Constant(1, 0.3);
  RewardModel r = reward_neg_sq_dist(target);

  Tensor x = rng::normal_matrix(1, 6, 21, rng::kData, 0);
  int t_cut = 37;
  RewardGradient out = refl_gradient(model, r, s, x, t_cut, nullptr);

  // a silent noise head leaves x0_hat = x / a(t)
  Tensor x0_hat = x / s.a(t_cut);
  double expect = (x0_hat.colwise() - target).colwise().squaredNorm().mean();
  CHECK(out.loss == doctest::Approx(expect).epsilon(1e-12));
  CHECK(out.loss == -out.mean_reward);
  CHECK(out.grads.size() == model.params().size());

  CHECK_THROWS_AS(refl_gradient(model, r, s, x, 0, nullptr), std::invalid_argument);
  CHECK_THROWS_AS(refl_gradient(model, r, s, x, s.T + 1, nullptr), std::invalid_argument);
  RewardModel blind;
  blind.value = r.value;
  CHECK_THROWS_AS(refl_gradient(model, blind, s, x, t_cut, nullptr), std::invalid_argument);
}

TEST_CASE("one-step reward backprop gradient audit") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  DenoiserModel model(tiny_spec(Pred::kEps, 2, 11));
  GmmOracle g = GmmOracle::ring(4, 1.5, 0.3);
  RewardModel r = reward_gmm_log_density(g, s);

  Tensor x = rng::normal_matrix(2, 5, 22, rng::kData, 0);
  Eigen::VectorXd tvec = Eigen::VectorXd::Constant(5, 41.0);
  RewardGradient out = refl_gradient(model, r, s, x, 41, nullptr);

  auto value = [&]() {
    ad::GradientTape tape;
    auto bound = model.bind(tape, true);
    TapedX0Eps p = taped_x0_eps(tape, model, bound, x, tvec, nullptr, s);
    return -r.value(p.x0.value()).mean();
  };
  CHECK(ad::finite_difference_check(model.params(), value, out.grads).max_rel_err < 1e-4);
}

TEST_CASE("rollout form replays the deterministic prefix") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  DenoiserModel model(tiny_spec(Pred::kEps, 1, 12));
  RewardModel r = reward_coordinate(0);
  std::vector<int> taus{0, 30, 70, 100};

  RewardGradient rolled = refl_gradient(model, r, s, taus, 3, 11, 2);
  RewardGradient again = refl_gradient(model, r, s, taus, 3, 11, 2);
  CHECK(rolled.loss == again.loss);

  int cut = rng::Stream(11, rng::kTime, 2, 0).uniform_int(1, 3);
  Denoiser den = as_denoiser(model);
  Tensor x = rng::normal_matrix(1, 3, 11, rng::kInit, 2);
  for (int i = 3; i > cut; --i) x = ddim_step(den, s, x, taus[i], taus[i - 1]);
  RewardGradient manual = refl_gradient(model, r, s, x, taus[cut], nullptr);

  CHECK(rolled.loss == manual.loss);
  CHECK(rolled.mean_reward == manual.mean_reward);
  REQUIRE(rolled.grads.size() == manual.grads.size());
  for (std::size_t i = 0; i < rolled.grads.size(); ++i)
    CHECK(rolled.grads[i] == manual.grads[i]);

  CHECK_THROWS_AS(refl_gradient(model, r, s, std::vector<int>{50}, 3, 1, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(refl_gradient(model, r, s, std::vector<int>{0, 101}, 3, 1, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(refl_gradient(model, r, s, std::vector<int>{0, 50, 50}, 3, 1, 0),
                  std::invalid_argument);
}

TEST_CASE("truncated-chain reward backprop") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  DenoiserModel model(tiny_spec(Pred::kEps));
  zero_params(model);
  RewardModel r = reward_coordinate(0);
  std::vector<int> taus{0, 40, 100};

  // a silent noise head telescopes: every step rescales by a(prev)/a(cur)
  RewardGradient out = draft_k_gradient(model, r, s, taus, 2, 3, 17, 4);
  Tensor x = rng::normal_matrix(1, 3, 17, rng::kInit, 4);
  CHECK(out.loss == doctest::Approx(-x.row(0).mean() / s.a(100)).epsilon(1e-12));
  CHECK(out.loss == -out.mean_reward);

  CHECK_THROWS_AS(draft_k_gradient(model, r, s, taus, 0, 3, 17, 4), std::invalid_argument);
  CHECK_THROWS_AS(draft_k_gradient(model, r, s, taus, 3, 3, 17, 4), std::invalid_argument);
}

TEST_CASE("truncated-chain gradient audit") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  DenoiserModel model(tiny_spec(Pred::kEps, 1, 13));
  GmmOracle g = GmmOracle::two_mode(1.0, 0.3);
  RewardModel r = reward_gmm_log_density(g, s);
  std::vector<int> taus{0, 40, 100};

  RewardGradient full = draft_k_gradient(model, r, s, taus, 2, 4, 23, 0);
  Tensor x_start = rng::normal_matrix(1, 4, 23, rng::kInit, 0);
  auto value = [&]() {
    ad::GradientTape tape;
    auto bound = model.bind(tape, true);
    ad::Var xv = tape.constant(x_start);
    for (int i = 2; i >= 1; --i) {
      Eigen::VectorXd tvec = Eigen::VectorXd::Constant(4, static_cast<double>(taus[i]));
      TapedX0Eps p = taped_x0_eps(tape, model, bound, xv, tvec, nullptr, s);
      xv = ad::scale(p.x0, s.a(taus[i - 1])) + ad::scale(p.eps, noise_coef(s, taus[i - 1]));
    }
    return -r.value(xv.value()).mean();
  };
  CHECK(ad::finite_difference_check(model.params(), value, full.grads).max_rel_err < 1e-4);

  // shallower truncation changes the objective, so the gradients must move
  RewardGradient shallow = draft_k_gradient(model, r, s, taus, 1, 4, 23, 0);
  double gap = 0.0;
  for (std::size_t i = 0; i < full.grads.size(); ++i)
    gap += (full.grads[i] - shallow.grads[i]).norm();
  CHECK(gap > 0.0);
}

TEST_CASE("score-shaping regression value") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  GmmOracle g = GmmOracle::two_mode(1.0, 0.3);
  RewardModel r = reward_gmm_log_density(g, s);
  Tensor x0 = sample_gmm(g, 6, 31);
  Tensor noise = rng::normal_matrix(1, 6, 32, rng::kLossNoise, 0);
  Eigen::VectorXi t(6);
  t << 5, 20, 41, 60, 77, 100;

  // a silent noise head makes the implied score vanish
  DenoiserModel quiet(tiny_spec(Pred::kEps));
  zero_params(quiet);
  {
    ad::GradientTape tape;
    auto bound = quiet.bind(tape, true);
    ad::Var loss = qsm_loss(tape, quiet, bound, r, s, x0, t, noise);
    double expect = 0.0;
    for (int j = 0; j < 6; ++j) {
      Eigen::VectorXd x_t = s.a(t(j)) * x0.col(j) + std::sqrt(s.one_minus_abar(t(j))) * noise.col(j);
      expect += r.grad_t(x_t, t(j)).squaredNorm();
    }
    CHECK(loss.scalar() == doctest::Approx(expect / 6.0).epsilon(1e-10));
  }

  // live network against the hand formula
  DenoiserModel model(tiny_spec(Pred::kEps, 1, 14));
  Denoiser den = as_denoiser(model);
  {
    ad::GradientTape tape;
    auto bound = model.bind(tape, true);
    ad::Var loss = qsm_loss(tape, model, bound, r, s, x0, t, noise);
    double expect = 0.0;
    for (int j = 0; j < 6; ++j) {
      double a = s.a(t(j)), omb = s.one_minus_abar(t(j));
      Eigen::VectorXd x_t = a * x0.col(j) + std::sqrt(omb) * noise.col(j);
      Eigen::VectorXd tv = Eigen::VectorXd::Constant(1, static_cast<double>(t(j)));
      X0EpsPair p = plain_pair(den, s, x_t, tv);
      Eigen::VectorXd score = (a / omb) * p.x0 - x_t / omb;
      expect += (score - Eigen::VectorXd(r.grad_t(x_t, t(j)))).squaredNorm();
    }
    CHECK(loss.scalar() == doctest::Approx(expect / 6.0).epsilon(1e-10));
  }

  // the drawing overload reproduces explicit draws
  {
    ad::GradientTape tape;
    auto bound = model.bind(tape, true);
    Eigen::VectorXi td = rng::uniform_int_vector(6, 1, s.T, 9, rng::kTime, 3);
    Tensor nd = rng::normal_matrix(1, 6, 9, rng::kLossNoise, 3);
    ad::Var frozen = qsm_loss(tape, model, bound, r, s, x0, td, nd);
    ad::GradientTape tape2;
    auto bound2 = model.bind(tape2, true);
    ad::Var drawn = qsm_loss(tape2, model, bound2, r, s, x0, 9, 3);
    CHECK(frozen.scalar() == drawn.scalar());
  }

  ad::GradientTape tape;
  auto bound = model.bind(tape, true);
  RewardModel plain = reward_neg_sq_dist(Eigen::VectorXd::Zero(1));
  CHECK_THROWS_AS(qsm_loss(tape, model, bound, plain, s, x0, t, noise), std::invalid_argument);
  CHECK_THROWS_AS(qsm_loss(tape, model, bound, r, s, Tensor(1, 0), Eigen::VectorXi(0),
                           Tensor(1, 0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(qsm_loss(tape, model, bound, r, s, x0, t, Tensor::Zero(2, 6)),
                  std::invalid_argument);
  Eigen::VectorXi bad = t;
  bad(0) = 0;
  CHECK_THROWS_AS(qsm_loss(tape, model, bound, r, s, x0, bad, noise), std::invalid_argument);
  bad(0) = s.T + 1;
  CHECK_THROWS_AS(qsm_loss(tape, model, bound, r, s, x0, bad, noise), std::invalid_argument);
}

TEST_CASE("score-shaping gradient audit") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  GmmOracle g = GmmOracle::two_mode(1.0, 0.3);
  RewardModel r = reward_gmm_log_density(g, s);
  DenoiserModel model(tiny_spec(Pred::kEps, 1, 15));
  Tensor x0 = sample_gmm(g, 5, 33);

  ad::GradientTape tape;
  auto bound = model.bind(tape, true);
  ad::Var loss = qsm_loss(tape, model, bound, r, s, x0, 7, 1);
  std::vector<Tensor> analytic = compute_gradients(tape, loss, bound);
  auto value = [&]() {
    ad::GradientTape t2;
    auto b2 = model.bind(t2, true);
    return qsm_loss(t2, model, b2, r, s, x0, 7, 1).scalar();
  };
  CHECK(ad::finite_difference_check(model.params(), value, analytic).max_rel_err < 1e-5);
}

TEST_CASE("policy-gradient surrogate on a recorded trajectory") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  DenoiserModel model(tiny_spec(Pred::kEps, 1, 16));
  RewardModel r = reward_coordinate(0);

  SamplerConfig cfg;
  cfg.taus = {0, 30, 70, 100};
  cfg.eta = 1.0;
  cfg.batch = 4;
  cfg.seed = 51;
  Trajectory traj = ddim_sample(as_denoiser(model), s, cfg);
  REQUIRE(traj.probabilistic());

  RewardGradient out = ddpo_surrogate(model, r, s, traj, false);
  CHECK(out.loss == doctest::Approx(ddpo_value(model, r, s, traj, false)).epsilon(1e-10));
  CHECK(out.mean_reward == r.value(traj.final).mean());

  RewardGradient centered = ddpo_surrogate(model, r, s, traj, true);
  CHECK(centered.loss == doctest::Approx(ddpo_value(model, r, s, traj, true)).epsilon(1e-10));
  CHECK(centered.mean_reward == out.mean_reward);

  // eta = 0 records no densities; a single jump to zero has no stochastic leg
  SamplerConfig det = cfg;
  det.eta = 0.0;
  Trajectory silent = ddim_sample(as_denoiser(model), s, det);
  CHECK_THROWS_AS(ddpo_surrogate(model, r, s, silent, false), std::invalid_argument);
  SamplerConfig jump = cfg;
  jump.taus = {0, 100};
  Trajectory one = ddim_sample(as_denoiser(model), s, jump);
  CHECK_THROWS_AS(ddpo_surrogate(model, r, s, one, false), std::invalid_argument);

  // the packaged update draws its own trajectory from a derived key
  RewardGradient packed = ddpo_sf_update(model, r, s, cfg.taus, 4, true, 8, 5);
  SamplerConfig replay = cfg;
  replay.seed = rng::key(8, rng::kMisc, 5, 0);
  Trajectory same = ddim_sample(as_denoiser(model), s, replay);
  RewardGradient manual = ddpo_surrogate(model, r, s, same, true);
  CHECK(packed.loss == manual.loss);
  CHECK(packed.mean_reward == manual.mean_reward);
  for (std::size_t i = 0; i < packed.grads.size(); ++i)
    CHECK(packed.grads[i] == manual.grads[i]);

  CHECK_THROWS_AS(ddpo_sf_update(model, r, s, {100, 30}, 4, false, 8, 5),
                  std::invalid_argument);
}

TEST_CASE("policy-gradient surrogate audit") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  DenoiserModel model(tiny_spec(Pred::kEps, 1, 18));
  RewardModel r = reward_coordinate(0);

  SamplerConfig cfg;
  cfg.taus = {0, 50, 100};
  cfg.eta = 1.0;
  cfg.batch = 3;
  cfg.seed = 52;
  Trajectory traj = ddim_sample(as_denoiser(model), s, cfg);

  RewardGradient out = ddpo_surrogate(model, r, s, traj, true);
  auto value = [&]() { return ddpo_value(model, r, s, traj, true); };
  CHECK(ad::finite_difference_check(model.params(), value, out.grads).max_rel_err < 1e-4);
}

TEST_CASE("reward-weighted regression weights") {
  Eigen::RowVectorXd rewards(3);
  rewards << 0.0, 1.0, 100.0;
  Eigen::RowVectorXd w = drwr_weights(rewards, 1.0, 5.0, false);
  CHECK(w(0) == 1.0);
  CHECK(w(1) == doctest::Approx(std::exp(1.0)).epsilon(1e-14));
  CHECK(w(2) == 5.0);
  CHECK((w.array() > 0.0).all());
  CHECK((w.array() <= 5.0).all());

  Eigen::RowVectorXd mild(3);
  mild << 0.0, 1.0, 2.0;
  Eigen::RowVectorXd centered = drwr_weights(mild, 0.5, 1e9, true);
  double mean = mild.mean();
  for (int j = 0; j < 3; ++j)
    CHECK(centered(j) == doctest::Approx(std::exp(0.5 * (mild(j) - mean))).epsilon(1e-12));

  CHECK(drwr_weights(rewards, 0.0, 5.0, false) == Eigen::RowVectorXd::Ones(3));
  CHECK_THROWS_AS(drwr_weights(rewards, 1.0, 0.0, false), std::invalid_argument);
}

TEST_CASE("reward-weighted regression loss") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  DenoiserModel model(tiny_spec(Pred::kEps, 1, 19));
  RewardModel r = reward_neg_sq_dist(Eigen::VectorXd::Zero(1));
  Tensor x0 = rng::normal_matrix(1, 6, 41, rng::kData, 0);
  Eigen::VectorXi t = rng::uniform_int_vector(6, 1, s.T, 41, rng::kTime, 0);
  Tensor noise = rng::normal_matrix(1, 6, 41, rng::kLossNoise, 0);

  // beta = 0 weights every sample by exactly one: the plain noise loss
  {
    ad::GradientTape ta, tb;
    auto ba = model.bind(ta, true);
    auto bb = model.bind(tb, true);
    ad::Var plain = loss_diffusion(ta, model, ba, x0, nullptr, s, Pred::kEps, t, noise);
    ad::Var weighted = drwr_loss(tb, model, bb, r, s, x0, 0.0, 10.0, false, t, noise);
    CHECK(plain.scalar() == weighted.scalar());
    std::vector<Tensor> ga = compute_gradients(ta, plain, ba);
    std::vector<Tensor> gb = compute_gradients(tb, weighted, bb);
    for (std::size_t i = 0; i < ga.size(); ++i) CHECK(ga[i] == gb[i]);
  }

  // weighted hand value
  {
    ad::GradientTape tape;
    auto bound = model.bind(tape, true);
    ad::Var loss = drwr_loss(tape, model, bound, r, s, x0, 0.7, 10.0, true, t, noise);
    Eigen::RowVectorXd w = drwr_weights(r.value(x0), 0.7, 10.0, true);
    Denoiser den = as_denoiser(model);
    double expect = 0.0;
    for (int j = 0; j < 6; ++j) {
      Eigen::VectorXd x_t =
          s.a(t(j)) * x0.col(j) + std::sqrt(s.one_minus_abar(t(j))) * noise.col(j);
      Eigen::VectorXd tv = Eigen::VectorXd::Constant(1, static_cast<double>(t(j)));
      expect += w(j) * (den(x_t, tv) - noise.col(j)).squaredNorm();
    }
    CHECK(loss.scalar() == doctest::Approx(expect / 6.0).epsilon(1e-12));
  }

  // the drawing overload reproduces explicit draws
  {
    ad::GradientTape ta, tb;
    auto ba = model.bind(ta, true);
    auto bb = model.bind(tb, true);
    Eigen::VectorXi td = rng::uniform_int_vector(6, 1, s.T, 13, rng::kTime, 2);
    Tensor nd = rng::normal_matrix(1, 6, 13, rng::kLossNoise, 2);
    ad::Var frozen = drwr_loss(ta, model, ba, r, s, x0, 1.0, 10.0, false, td, nd);
    ad::Var drawn = drwr_loss(tb, model, bb, r, s, x0, 1.0, 10.0, false, 13, 2);
    CHECK(frozen.scalar() == drawn.scalar());
  }

  // gradient audit; the weights depend only on the clean data
  {
    ad::GradientTape tape;
    auto bound = model.bind(tape, true);
    ad::Var loss = drwr_loss(tape, model, bound, r, s, x0, 0.7, 10.0, true, t, noise);
    std::vector<Tensor> analytic = compute_gradients(tape, loss, bound);
    auto value = [&]() {
      ad::GradientTape t2;
      auto b2 = model.bind(t2, true);
      return drwr_loss(t2, model, b2, r, s, x0, 0.7, 10.0, true, t, noise).scalar();
    };
    CHECK(ad::finite_difference_check(model.params(), value, analytic).max_rel_err < 1e-5);
  }

  ad::GradientTape tape;
  auto bound = model.bind(tape, true);
  DenoiserModel wrong(tiny_spec(Pred::kX0));
  auto wb = wrong.bind(tape, true);
  CHECK_THROWS_AS(drwr_loss(tape, wrong, wb, r, s, x0, 1.0, 10.0, false, t, noise),
                  std::invalid_argument);
  CHECK_THROWS_AS(drwr_loss(tape, model, bound, r, s, Tensor(1, 0), 1.0, 10.0, false,
                            Eigen::VectorXi(0), Tensor(1, 0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(drwr_loss(tape, model, bound, r, s, x0, 1.0, 10.0, false, t,
                            Tensor::Zero(2, 6)),
                  std::invalid_argument);
  Eigen::VectorXi bad = t;
  bad(0) = 0;
  CHECK_THROWS_AS(drwr_loss(tape, model, bound, r, s, x0, 1.0, 10.0, false, bad, noise),
                  std::invalid_argument);
}

TEST_CASE("fine-tune config validation") {
  FinetuneConfig cfg;
  cfg.taus = {0, 50, 100};
  CHECK_NOTHROW(cfg.validate());

  auto broken = [&](auto mutate) {
    FinetuneConfig c = cfg;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  };
  broken([](FinetuneConfig& c) { c.method = "ppo"; });
  broken([](FinetuneConfig& c) { c.steps = -1; });
  broken([](FinetuneConfig& c) { c.batch = 0; });
  broken([](FinetuneConfig& c) { c.lr = 0.0; });
  broken([](FinetuneConfig& c) { c.K = 0; });
  broken([](FinetuneConfig& c) { c.w_max = 0.0; });
  broken([](FinetuneConfig& c) { c.baseline = "median"; });
  broken([](FinetuneConfig& c) { c.log_every = 0; });
  broken([](FinetuneConfig& c) { c.taus.clear(); });
  broken([](FinetuneConfig& c) {
    c.method = "ddpo";
    c.sampler = "ddim";
  });

  // regression-style methods run without a sampler grid
  FinetuneConfig data_only;
  data_only.method = "drwr";
  CHECK_NOTHROW(data_only.validate());
}

TEST_CASE("fine-tune loop climbs a linear reward") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  DenoiserModel model(tiny_spec(Pred::kEps, 1, 20));
  RewardModel r = reward_coordinate(0);

  FinetuneConfig cfg;
  cfg.method = "draft";
  cfg.taus = {0, 100};
  cfg.K = 1;
  cfg.steps = 30;
  cfg.batch = 16;
  cfg.lr = 2e-2;
  cfg.seed = 5;
  FinetuneReport rep = finetune(model, r, s, cfg);

  REQUIRE(static_cast<int>(rep.step.size()) == cfg.steps);
  REQUIRE(rep.mean_reward.size() == rep.step.size());
  REQUIRE(rep.loss.size() == rep.step.size());
  CHECK(rep.step.front() == 0);
  CHECK(rep.step.back() == cfg.steps - 1);
  for (double v : rep.loss) CHECK(std::isfinite(v));

  double early = 0.0, late = 0.0;
  for (int i = 0; i < 5; ++i) {
    early += rep.mean_reward[i] / 5.0;
    late += rep.mean_reward[cfg.steps - 1 - i] / 5.0;
  }
  CHECK(late > early);

  // slow weights trail the fast ones
  double gap = 0.0;
  for (std::size_t i = 0; i < model.w.size(); ++i) gap += (model.w[i] - model.ema_w[i]).norm();
  CHECK(gap > 0.0);

  // bit-identical replay on a twin
  DenoiserModel twin(tiny_spec(Pred::kEps, 1, 20));
  FinetuneReport rep2 = finetune(twin, r, s, cfg);
  CHECK(rep2.loss == rep.loss);
  for (std::size_t i = 0; i < model.w.size(); ++i) CHECK(twin.w[i] == model.w[i]);
}

TEST_CASE("fine-tune loop regression methods and failure modes") {
  auto s = build_vp_schedule(100, 1e-4, 0.02);
  GmmOracle g = GmmOracle::two_mode(1.0, 0.3);
  RewardModel r = reward_gmm_log_density(g, s);
  DataFn data = [&](std::uint64_t step, int n) {
    return sample_gmm(g, n, rng::mix(404 ^ step));
  };

  FinetuneConfig cfg;
  cfg.method = "qsm";
  cfg.steps = 4;
  cfg.batch = 6;
  cfg.lr = 1e-3;
  cfg.seed = 6;

  DenoiserModel model(tiny_spec(Pred::kEps, 1, 21));
  FinetuneReport rep = finetune(model, r, s, cfg, data);
  CHECK(rep.loss.size() == 4);
  for (double v : rep.loss) CHECK(std::isfinite(v));

  cfg.method = "drwr";
  DenoiserModel model2(tiny_spec(Pred::kEps, 1, 21));
  FinetuneReport rep2 = finetune(model2, r, s, cfg, data);
  CHECK(rep2.loss.size() == 4);

  // zero steps is a valid no-op
  FinetuneConfig idle = cfg;
  idle.steps = 0;
  DenoiserModel model3(tiny_spec(Pred::kEps, 1, 21));
  CHECK(finetune(model3, r, s, idle, data).loss.empty());

  // regression methods cannot run without data
  CHECK_THROWS_AS(finetune(model3, r, s, cfg), std::invalid_argument);

  // a blown-up learning rate must surface, not silently spin
  FinetuneConfig hot = cfg;
  hot.lr = 1e18;
  hot.steps = 50;
  DenoiserModel model4(tiny_spec(Pred::kEps, 1, 21));
  CHECK_THROWS_AS(finetune(model4, r, s, hot, data), std::runtime_error);
}

}  // TEST_SUITE
