#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dlab/net.hpp"
#include "dlab/parameterizations.hpp"
#include "dlab/schedules.hpp"

namespace dlab {

/// Shared knobs for the reverse-time samplers. `taus` is the ascending
/// timestep subsequence {0 = t_0 < ... < t_N = T}; leave empty for the full
/// range. `base_index` offsets the per-column noise identity so chunked
/// batches reproduce the unchunked run.
struct SamplerConfig {
  std::vector<int> taus;
  double eta = 0.0;
  double cfg_w = 0.0;
  std::uint64_t seed = 0;
  int batch = 1;
  Tensor cond;  // cond_dim x batch; empty = unconditional
  std::uint64_t base_index = 0;
};

/// {0, 1, ..., T}.
std::vector<int> full_range_taus(int T);
/// steps+1 evenly spread grid points {0, ..., T}, strictly increasing.
std::vector<int> uniform_taus(int T, int steps);
/// N+1 angular times descending from pi/2 to 0.
std::vector<double> uniform_trig_times(int steps);

/// Recorded reverse pass. Log-probabilities are present only for samplers
/// that draw each transition from an explicit Gaussian (mean + std), one
/// entry per noisy transition, one column per sample.
struct Trajectory {
  std::vector<double> times;   // descending; times.front() is the start
  std::vector<Tensor> states;  // aligned with times, sample-space values
  std::vector<Eigen::RowVectorXd> step_log_probs;
  Tensor final;

  bool probabilistic() const { return !step_log_probs.empty(); }
  Eigen::RowVectorXd total_log_prob() const;
};

/// Guidance-weighted prediction in the model's native kind:
/// pred(x, c) + w * (pred(x, c) - pred(x, null)).
Prediction cfg_predict(const Denoiser& model, const Tensor& x, double t, const Tensor* cond,
                       double w);

enum class DdpmVariant {
  kFull,        // posterior mean + posterior std, records log-probs
  kSimplified,  // one-step mean + marginal-noise std, non-probabilistic
};
Trajectory ddpm_sample(const Denoiser& model, const VpDiscreteSchedule& s,
                       const SamplerConfig& cfg, DdpmVariant variant = DdpmVariant::kFull);

Trajectory ddim_sample(const Denoiser& model, const VpDiscreteSchedule& s,
                       const SamplerConfig& cfg);

/// Unadjusted Langevin updates x += (delta/2) * score + sqrt(delta) * noise
/// from a standard-normal start.
Tensor smld_langevin_sample(const std::function<Tensor(const Tensor&)>& score_fn, double delta,
                            int n_steps, int dim, const SamplerConfig& cfg);

/// Alternating denoise / re-noise pass over the warped grid; `f` must be a
/// clean-sample map (boundary-consistent head).
Trajectory cm_multistep_sample(const Denoiser& f, const VeSchedule& s, int n_steps,
                               const SamplerConfig& cfg);

using NoiseFn =
    std::function<Tensor(int t_cur, Eigen::Index rows, Eigen::Index cols)>;

/// Tweedie estimate followed by a fresh forward re-noising per step; the last
/// step emits the clean estimate. `noise_override` replaces the re-noising
/// draw (passing the model's own noise prediction turns this into
/// deterministic subsequence sampling).
Trajectory lcm_sample(const Denoiser& model, const VpDiscreteSchedule& s,
                      const SamplerConfig& cfg, const NoiseFn& noise_override = nullptr);

enum class InstaFlowVariant { kFull, kSimplified, kDdim };
Trajectory instaflow_sample(const Denoiser& v_model, const VpDiscreteSchedule& s,
                            const SamplerConfig& cfg, InstaFlowVariant variant);

/// Explicit Euler over the uniform grid on [0, 1], noise-to-data orientation.
Tensor rf_euler_sample(const Denoiser& v_model, const RfSchedule& s, int n_steps,
                       const SamplerConfig& cfg);

/// Angular rotation steps x_t = cos(s - t) x_s - sin(s - t) * v(x_s, s) over
/// the given descending times; v is the physical path velocity.
Tensor trigflow_sample(const Denoiser& v_model, const TrigSchedule& s,
                       const std::vector<double>& times, const SamplerConfig& cfg);

}  // namespace dlab
