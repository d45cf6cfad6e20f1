#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dlab/net.hpp"
#include "dlab/schedules.hpp"

namespace dlab {

struct TrainConfig {
  std::string objective = "eps";  // eps | x0 | v | score | ct | rf | trig | trig-ct
  int batch = 64;
  int steps = 1000;
  double lr = 1e-3;
  std::string optimizer = "sgd";  // sgd | adam
  double momentum = 0.9;
  std::string weighting = "default";  // score loss w(t): default | sigma2 | inv-score-norm
  double weight_scale = 1.0;
  double huber_c = 0.0;  // 0 = squared l2 distance, > 0 = pseudo-Huber
  std::string ct_policy = "constant";  // constant | shrinking
  int ct_grid = 32;                    // number of discretization points
  int ct_interval = 1;                 // index gap between the paired times
  double lambda_ct = 1.0;
  double cond_dropout = 0.0;  // chance of replacing the condition by the null token
  std::uint64_t seed = 0;
  int log_every = 100;

  void validate() const;
};

/// w(t) families for the weighted score-matching loss. `dim` enters the
/// inverse-expected-score-norm family, which is defined up to a scale.
std::function<double(int)> make_weighting(const std::string& name, const VpDiscreteSchedule& s,
                                          int dim, double scale);

// ---- objectives -------------------------------------------------------
// Each loss has a frozen-draw core (explicit times and noise) used by the
// gradient checks, plus a drawing overload addressed by (seed, step).

ad::Var loss_diffusion(ad::GradientTape& tape, const DenoiserModel& model,
                       const DenoiserModel::Bound& bound, const Tensor& x0, const Tensor* cond,
                       const VpDiscreteSchedule& s, Pred kind, const Eigen::VectorXi& t,
                       const Tensor& noise);
ad::Var loss_diffusion(ad::GradientTape& tape, const DenoiserModel& model,
                       const DenoiserModel::Bound& bound, const Tensor& x0, const Tensor* cond,
                       const VpDiscreteSchedule& s, Pred kind, std::uint64_t seed,
                       std::uint64_t step);

ad::Var loss_score_matching(ad::GradientTape& tape, const DenoiserModel& model,
                            const DenoiserModel::Bound& bound, const Tensor& x0,
                            const VpDiscreteSchedule& s, const std::function<double(int)>& w,
                            const Eigen::VectorXi& t, const Tensor& noise);
ad::Var loss_score_matching(ad::GradientTape& tape, const DenoiserModel& model,
                            const DenoiserModel::Bound& bound, const Tensor& x0,
                            const VpDiscreteSchedule& s, const std::function<double(int)>& w,
                            std::uint64_t seed, std::uint64_t step);

/// Self-consistency objective over adjacent grid times with a shared noise
/// draw; the slow-weight target receives no gradient. `idx` are 1-based grid
/// positions of the lower time, paired with position idx + interval.
ad::Var loss_consistency_training(ad::GradientTape& tape, const DenoiserModel& model,
                                  const DenoiserModel::Bound& bound, const Tensor& x0,
                                  const VeSchedule& s, int grid_n, int interval,
                                  const Eigen::VectorXi& idx, const Tensor& noise,
                                  double huber_c = 0.0, double lambda = 1.0);
ad::Var loss_consistency_training(ad::GradientTape& tape, const DenoiserModel& model,
                                  const DenoiserModel::Bound& bound, const Tensor& x0,
                                  const VeSchedule& s, int grid_n, int interval,
                                  std::uint64_t seed, std::uint64_t step, double huber_c = 0.0,
                                  double lambda = 1.0);

/// Straight-interpolant regression; `y1` is data, `y0` noise, t in [0, 1].
ad::Var loss_rectified_flow(ad::GradientTape& tape, const DenoiserModel& model,
                            const DenoiserModel::Bound& bound, const Tensor& y1,
                            const Tensor& y0, const RfSchedule& s, const Eigen::VectorXd& t);
ad::Var loss_rectified_flow(ad::GradientTape& tape, const DenoiserModel& model,
                            const DenoiserModel::Bound& bound, const Tensor& y1,
                            const RfSchedule& s, std::uint64_t seed, std::uint64_t step);

ad::Var loss_trigflow_diffusion(ad::GradientTape& tape, const DenoiserModel& model,
                                const DenoiserModel::Bound& bound, const Tensor& x0,
                                const TrigSchedule& s, const Eigen::VectorXd& t,
                                const Tensor& unit_noise);
ad::Var loss_trigflow_diffusion(ad::GradientTape& tape, const DenoiserModel& model,
                                const DenoiserModel::Bound& bound, const Tensor& x0,
                                const TrigSchedule& s, std::uint64_t seed, std::uint64_t step);

/// Continuous-time consistency surrogate: mean of -lambda(t) sin(t) sigma
/// v_theta . dfdt, with dfdt the (frozen) total time derivative of the
/// slow-weight clean-sample map along the noising path.
ad::Var trigflow_ct_surrogate(ad::GradientTape& tape, const DenoiserModel& model,
                              const DenoiserModel::Bound& bound, const Tensor& x0,
                              const TrigSchedule& s, const Eigen::VectorXd& t,
                              const Tensor& unit_noise, const Tensor& dfdt,
                              const std::function<double(double)>& lambda);

/// dfdt of the slow-weight map, computed with an analytic directional
/// derivative along (dx_t/dt, 1). Throws on non-finite values.
Tensor trigflow_target_dfdt(const DenoiserModel& model, const Tensor& x0, const TrigSchedule& s,
                            const Eigen::VectorXd& t, const Tensor& unit_noise);

struct TrigCtGradient {
  std::vector<Tensor> grads;
  double surrogate = 0.0;
};
TrigCtGradient trigflow_ct_gradient(const DenoiserModel& model, const Tensor& x0,
                                    const TrigSchedule& s,
                                    const std::function<double(double)>& lambda,
                                    std::uint64_t seed, std::uint64_t step);

// ---- optimizers --------------------------------------------------------

class Optimizer {
 public:
  static Optimizer sgd(double lr, double momentum = 0.9);
  static Optimizer adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                        double eps = 1e-8);

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);
  double lr() const { return lr_; }

 private:
  enum class Kind { kSgd, kAdam } kind_ = Kind::kSgd;
  double lr_ = 0.0, momentum_ = 0.0, beta1_ = 0.0, beta2_ = 0.0, eps_ = 0.0;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ---- training loop -----------------------------------------------------

using DataFn = std::function<Tensor(int step, int n)>;

struct TrainContext {
  const VpDiscreteSchedule* vp = nullptr;
  const VeSchedule* ve = nullptr;
  const RfSchedule* rf = nullptr;
  const TrigSchedule* trig = nullptr;
  DataFn cond;  // optional condition batches, aligned with the data draw
};

struct TrainReport {
  std::vector<int> step;
  std::vector<double> loss;
  std::vector<double> smoothed;  // running average, same cadence as `loss`
};

/// Deterministic given config.seed. Updates EMA weights every step; throws
/// std::runtime_error with a diagnostic when the loss turns non-finite.
TrainReport train(DenoiserModel& model, const DataFn& data, const TrainConfig& cfg,
                  const TrainContext& ctx);

}  // namespace dlab
