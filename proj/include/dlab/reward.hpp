#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dlab/net.hpp"
#include "dlab/samplers.hpp"
#include "dlab/schedules.hpp"
#include "dlab/tape.hpp"
#include "dlab/toyworld.hpp"
#include "dlab/training.hpp"

namespace dlab {

/// Scalar objective on samples, one reward per column. `grad` must be the
/// exact derivative of `value` whenever `differentiable` is set. The diffused
/// pair (value_t / grad_t) scores noisy states at a schedule time; only
/// methods that shape intermediate states need it.
struct RewardModel {
  std::string name;
  bool differentiable = false;
  std::function<Eigen::RowVectorXd(const Tensor&)> value;
  std::function<Tensor(const Tensor&)> grad;
  std::function<Eigen::RowVectorXd(const Tensor&, int)> value_t;
  std::function<Tensor(const Tensor&, int)> grad_t;

  bool has_diffused() const { return static_cast<bool>(grad_t); }
};

/// R(x) = -|x - target|^2, maximized at `target`.
RewardModel reward_neg_sq_dist(const Eigen::VectorXd& target);
/// R(x) = x(axis); the canonical unbounded improvement probe.
RewardModel reward_coordinate(int axis = 0);
/// Log-density of `g`, including the diffused pair: at time t the reward on
/// x_t is the log-density of the forward-diffused mixture, whose gradient is
/// the exact score the model's own score estimate should match.
RewardModel reward_gmm_log_density(const GmmOracle& g, const VpDiscreteSchedule& s);

struct RewardGradient {
  std::vector<Tensor> grads;  // d(objective)/d(weights), bind order
  double mean_reward = 0.0;
  double loss = 0.0;  // the minimized surrogate (e.g. -mean reward)
};

/// Gradient of -mean R(x0_hat) where x0_hat is the model's one-step clean
/// estimate at the given diffused state; nothing upstream of x_cut is
/// differentiated. Requires a differentiable reward.
RewardGradient refl_gradient(const DenoiserModel& model, const RewardModel& reward,
                             const VpDiscreteSchedule& s, const Tensor& x_cut, int t_cut,
                             const Tensor* cond = nullptr);
/// Rollout form: deterministic reverse pass without gradients down to a drawn
/// interior grid time, then the one-step estimate above.
RewardGradient refl_gradient(const DenoiserModel& model, const RewardModel& reward,
                             const VpDiscreteSchedule& s, const std::vector<int>& taus,
                             int batch, std::uint64_t seed, std::uint64_t step);

/// Backprop through exactly the last K deterministic sampler steps; earlier
/// steps run detached. K = taus.size()-1 differentiates the whole chain from
/// the start noise. Throws when K exceeds the number of steps.
RewardGradient draft_k_gradient(const DenoiserModel& model, const RewardModel& reward,
                                const VpDiscreteSchedule& s, const std::vector<int>& taus,
                                int K, int batch, std::uint64_t seed, std::uint64_t step);

/// Mean-squared gap between the model's score estimate and the reward's
/// diffused gradient: |s_theta(x_t) - grad R(x_t, t)|^2 with
/// s_theta = -(x_t - sqrt(abar) x0_hat) / (1 - abar). Requires the diffused
/// reward pair.
ad::Var qsm_loss(ad::GradientTape& tape, const DenoiserModel& model,
                 const DenoiserModel::Bound& bound, const RewardModel& reward,
                 const VpDiscreteSchedule& s, const Tensor& x0, const Eigen::VectorXi& t,
                 const Tensor& noise);
ad::Var qsm_loss(ad::GradientTape& tape, const DenoiserModel& model,
                 const DenoiserModel::Bound& bound, const RewardModel& reward,
                 const VpDiscreteSchedule& s, const Tensor& x0, std::uint64_t seed,
                 std::uint64_t step);

/// Score-function surrogate on a recorded probabilistic trajectory:
/// -mean_j A_j sum_t log p_theta(x_{t-1} | x_t) with states and advantages
/// detached; the final deterministic step carries no probability. A is the
/// reward of the finished sample, optionally centered by the batch mean.
/// Throws when the trajectory recorded no log-probabilities.
RewardGradient ddpo_surrogate(const DenoiserModel& model, const RewardModel& reward,
                              const VpDiscreteSchedule& s, const Trajectory& traj,
                              bool mean_baseline);
/// Rolls out the stochastic sampler on `taus` and applies the surrogate.
RewardGradient ddpo_sf_update(const DenoiserModel& model, const RewardModel& reward,
                              const VpDiscreteSchedule& s, const std::vector<int>& taus,
                              int batch, bool mean_baseline, std::uint64_t seed,
                              std::uint64_t step);

/// min(exp(beta * A), w_max) per sample, A the reward optionally centered by
/// the batch mean. Always in (0, w_max].
Eigen::RowVectorXd drwr_weights(const Eigen::RowVectorXd& rewards, double beta, double w_max,
                                bool mean_baseline);

/// Reward-weighted regression: the plain noise-prediction loss with each
/// sample's squared error scaled by its detached weight. beta = 0 recovers
/// the unweighted loss.
ad::Var drwr_loss(ad::GradientTape& tape, const DenoiserModel& model,
                  const DenoiserModel::Bound& bound, const RewardModel& reward,
                  const VpDiscreteSchedule& s, const Tensor& x0, double beta, double w_max,
                  bool mean_baseline, const Eigen::VectorXi& t, const Tensor& noise);
ad::Var drwr_loss(ad::GradientTape& tape, const DenoiserModel& model,
                  const DenoiserModel::Bound& bound, const RewardModel& reward,
                  const VpDiscreteSchedule& s, const Tensor& x0, double beta, double w_max,
                  bool mean_baseline, std::uint64_t seed, std::uint64_t step);

struct FinetuneConfig {
  std::string method = "refl";  // refl | draft | qsm | ddpo | drwr
  std::vector<int> taus;        // reverse grid for rollout-based methods
  int K = 1;                    // draft truncation depth
  double beta = 1.0;            // drwr temperature
  double w_max = 10.0;          // drwr weight cap
  std::string baseline = "none";   // none | mean
  std::string sampler = "full";    // ddpo needs per-step densities
  int steps = 100;
  int batch = 16;
  double lr = 1e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  int log_every = 10;

  void validate() const;
};

struct FinetuneReport {
  std::vector<int> step;
  std::vector<double> mean_reward;
  std::vector<double> loss;
};

/// Reward fine-tuning loop; one optimizer update per batch, slow weights
/// tracked every step. qsm and drwr regress on `data` batches; the rollout
/// methods generate their own samples. Throws std::runtime_error when the
/// objective turns non-finite.
FinetuneReport finetune(DenoiserModel& model, const RewardModel& reward,
                        const VpDiscreteSchedule& s, const FinetuneConfig& cfg,
                        const DataFn& data = nullptr);

}  // namespace dlab
