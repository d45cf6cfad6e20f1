#pragma once

#include <functional>

#include "dlab/prediction.hpp"
#include "dlab/schedules.hpp"

namespace dlab {

/// Per-column signal products for a vector of absolute VP timesteps.
Eigen::RowVectorXd abar_at_times(const VpDiscreteSchedule& s, const Eigen::VectorXd& t);

/// The clean/noise pair implied by a prediction at its anchor; every
/// variance-preserving conversion factors through this.
struct X0EpsPair {
  Tensor x0, eps;
};
X0EpsPair to_x0_eps(const Prediction& p, const VpDiscreteSchedule& s, bool clamp = true);

/// Change of prediction kind at a fixed anchor. Variance-preserving family:
/// {eps, x0, v, vbar, vrf}; the vrf target re-anchors to y_t. kFCons is a
/// clean-sample estimate and converts to/from kX0 by identity.
Prediction convert_prediction(const Prediction& p, Pred to, const VpDiscreteSchedule& s,
                              bool clamp = true);
/// Trig family: {vtrig, x0} plus the sigma-scaled noise under kEps.
Prediction convert_prediction(const Prediction& p, Pred to, const TrigSchedule& s);
/// Variance-exploding family: {f, x0, eps}.
Prediction convert_prediction(const Prediction& p, Pred to, const VeSchedule& s);

/// Score of the diffused marginal implied by the prediction. `via` selects
/// the algebraic route (noise estimate or clean estimate); both agree.
Tensor score_from_prediction(const Prediction& p, const VpDiscreteSchedule& s,
                             Pred via = Pred::kEps, bool clamp = true);

/// Boundary-respecting output heads that turn a raw network output into a
/// consistency-function value f(x_t, t) ~= x0.
struct HeadCoefs {
  Eigen::RowVectorXd c_skip, c_out;
};
HeadCoefs edm_head_coefs(const Eigen::VectorXd& t, const VeSchedule& s);
HeadCoefs lcm_head_coefs(const Eigen::VectorXd& t, double sigma_data = 0.5);

Tensor consistency_head_edm(const Tensor& raw_x0, const Tensor& x_t, const Eigen::VectorXd& t,
                            const VeSchedule& s);
Tensor consistency_head_lcm(const Tensor& eps_hat, const Tensor& x_t, const Eigen::VectorXd& t,
                            const VpDiscreteSchedule& s, double sigma_data = 0.5);
Tensor consistency_head_trig(const Tensor& raw_v, const Tensor& x_t, const Eigen::VectorXd& t,
                             const TrigSchedule& s);

/// x_t rescaled onto the rectified-flow trajectory, with the blend factor
/// gamma and divisor beta = sqrt(abar) + sqrt(1-abar) exposed for reuse.
struct RfScaled {
  Tensor y;
  Eigen::RowVectorXd gamma, beta;
};
RfScaled rf_scale_sample(const Tensor& x_t, const Eigen::VectorXd& t, const VpDiscreteSchedule& s);

/// Velocity on the diffusion trajectory mapped to the velocity of the
/// rescaled trajectory at the same point.
Tensor map_velocity_diffusion_to_rf(const Tensor& v_x, const Tensor& x_t,
                                    const Eigen::VectorXd& t, const VpDiscreteSchedule& s);

/// Interpolation-path coefficients x_t = alpha(t) x0 + beta(t) x1 and their
/// time derivatives, for the score-to-velocity identity (x1 standard normal).
struct PathFns {
  std::function<double(double)> alpha, dalpha, beta, dbeta;
};
Tensor velocity_from_score_unified(const Tensor& x_t, double t, const Tensor& score,
                                   const PathFns& path);

}  // namespace dlab
