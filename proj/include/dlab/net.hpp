#pragma once

#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "dlab/prediction.hpp"
#include "dlab/rng.hpp"
#include "dlab/tape.hpp"

namespace dlab {

/// Architecture and conventions of a denoiser net. Batches are laid out one
/// sample per column; the net input is [x; time features; condition] stacked
/// along rows.
struct ModelSpec {
  int data_dim = 1;
  int cond_dim = 0;  // 0 = unconditional; the all-zeros vector is the null token
  std::vector<int> hidden = {64, 64};
  int time_freqs = 16;  // 0 = timeless net (plain generators, discriminators)
  Pred head = Pred::kEps;
  double t_lo = 0.0;  // embedding domain, matches the schedule the net is trained on
  double t_hi = 1000.0;
  double ema_decay = 0.95;
  double sigma_data = 0.5;  // scaling for kVTrig / kFCons head conventions
  double eps_min = 0.002;   // left time boundary for the kFCons head
  int out_channels = 0;     // 0 = data_dim; nonzero for scalar-output nets
  uint64_t init_seed = 0;

  int in_dim() const { return data_dim + 2 * time_freqs + cond_dim; }
  int out_dim() const { return out_channels > 0 ? out_channels : data_dim; }
};

/// Sinusoidal features of shape (2*freqs x n): geometric frequency ladder
/// over position p = 1000 * (t - lo) / (hi - lo).
Tensor time_features(const Eigen::VectorXd& t, double lo, double hi, int freqs);
Tensor time_features_dt(const Eigen::VectorXd& t, double lo, double hi, int freqs);

/// Fully-connected tanh net with He-style fan-in initialization and a linear
/// output layer. Keeps an exponential moving average of its own weights for
/// use as a slow-moving target.
class DenoiserModel {
 public:
  DenoiserModel() = default;
  explicit DenoiserModel(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }

  /// Raw head output; no head conventions applied.
  Tensor operator()(const Tensor& x, const Eigen::VectorXd& t, const Tensor* cond = nullptr,
                    bool use_ema = false) const;

  struct Bound {
    std::vector<ad::Var> params;  // W0, b0, W1, b1, ...
  };
  Bound bind(ad::GradientTape& tape, bool trainable, bool use_ema = false) const;
  ad::Var forward(ad::GradientTape& tape, const Bound& bound, const ad::Var& x,
                  const Eigen::VectorXd& t, const Tensor* cond = nullptr) const;

  /// Activation of the last hidden layer — the trunk output feeding the final
  /// linear head. Lets auxiliary heads (e.g. discriminators) share the trunk.
  Tensor hidden_features(const Tensor& x, const Eigen::VectorXd& t, const Tensor* cond = nullptr,
                         bool use_ema = false) const;
  ad::Var forward_features(ad::GradientTape& tape, const Bound& bound, const ad::Var& x,
                           const Eigen::VectorXd& t, const Tensor* cond = nullptr) const;

  /// Raw output together with its directional derivative along (x_dot, t_dot).
  std::pair<Tensor, Tensor> value_and_jvp(const Tensor& x, const Eigen::VectorXd& t,
                                          const Tensor& x_dot, double t_dot,
                                          const Tensor* cond = nullptr,
                                          bool use_ema = false) const;

  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
  std::vector<Tensor*> ema_params();
  long param_count() const;

  void ema_update();
  void copy_weights_to_ema();

  // storage, in layer order; exposed for checkpoint io
  std::vector<Tensor> w, b, ema_w, ema_b;

 private:
  ModelSpec spec_;
  std::vector<int> widths_;  // in, hidden..., out
};

/// The model's prediction with head conventions applied:
///   kVTrig: sigma * net(x / sigma, t)   (physical path velocity)
///   kFCons: c_skip(t) * x + c_out(t) * net(x, t)  (clean-sample estimate
///           with an exact fixed point at t = eps_min)
///   anything else: the raw head output.
Tensor evaluate_network(const DenoiserModel& model, const Tensor& x, const Eigen::VectorXd& t,
                        const Tensor* cond = nullptr, bool use_ema = false);

/// Type-erased prediction function consumed by the samplers; `kind` states
/// what eval() returns. Oracles and networks both fit behind this.
struct Denoiser {
  Pred kind = Pred::kEps;
  int data_dim = 0;
  int cond_dim = 0;  // 0 = cannot be guided
  std::function<Tensor(const Tensor& x, const Eigen::VectorXd& t, const Tensor* cond)> eval;

  Tensor operator()(const Tensor& x, const Eigen::VectorXd& t, const Tensor* cond = nullptr) const {
    return eval(x, t, cond);
  }
  Tensor operator()(const Tensor& x, double t, const Tensor* cond = nullptr) const {
    return eval(x, Eigen::VectorXd::Constant(x.cols(), t), cond);
  }
};

Denoiser as_denoiser(const DenoiserModel& model, bool use_ema = false);

/// d(loss)/d(params) for a scalar objective built on a tape.
std::vector<Tensor> compute_gradients(ad::GradientTape& tape, const ad::Var& loss,
                                      const DenoiserModel::Bound& bound);

}  // namespace dlab
