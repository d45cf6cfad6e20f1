#include "dlab/parameterizations.hpp"

#include <cmath>
#include <stdexcept>

namespace dlab {

namespace {

int step_index(double t) {
  double r = std::round(t);
  if (std::abs(t - r) > 1e-9)
    throw std::invalid_argument("prediction time must be an integer step index");
  return static_cast<int>(r);
}

void check_shapes(const Prediction& p) {
  if (p.value.rows() != p.anchor.rows() || p.value.cols() != p.anchor.cols())
    throw std::invalid_argument("prediction value/anchor shape mismatch");
  if (p.t.size() != p.value.cols())
    throw std::invalid_argument("prediction needs one time per column");
}

}  // namespace

Eigen::RowVectorXd abar_at_times(const VpDiscreteSchedule& s, const Eigen::VectorXd& t) {
  Eigen::RowVectorXd out(t.size());
  for (Eigen::Index j = 0; j < t.size(); ++j) out(j) = s.abar(step_index(t(j)));
  return out;
}

X0EpsPair to_x0_eps(const Prediction& p, const VpDiscreteSchedule& s, bool clamp) {
  check_shapes(p);
  Eigen::RowVectorXd abar = abar_at_times(s, p.t);
  X0EpsPair pair;
  pair.x0.resize(p.value.rows(), p.value.cols());
  pair.eps.resize(p.value.rows(), p.value.cols());
  for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
    double ab = abar(j);
    double omb = 1.0 - ab;
    if (omb < 1e-12) {
      if (!clamp) throw std::domain_error("conversion at the abar = 1 boundary without clamp");
      omb = 1e-12;
    }
    double a = std::sqrt(ab);
    double b = std::sqrt(omb);
    auto v = p.value.col(j);
    switch (p.kind) {
      case Pred::kEps: {
        pair.eps.col(j) = v;
        pair.x0.col(j) = (p.anchor.col(j) - b * v) / a;
        break;
      }
      case Pred::kX0:
      case Pred::kFCons: {
        pair.x0.col(j) = v;
        pair.eps.col(j) = (p.anchor.col(j) - a * v) / b;
        break;
      }
      case Pred::kVDiff:
      case Pred::kVBar: {
        Eigen::VectorXd vv = (p.kind == Pred::kVBar) ? Eigen::VectorXd(-v) : Eigen::VectorXd(v);
        pair.x0.col(j) = a * p.anchor.col(j) + b * vv;
        pair.eps.col(j) = b * p.anchor.col(j) - a * vv;
        break;
      }
      case Pred::kVRf: {
        double beta = a + b;
        double gamma = a / beta;
        pair.x0.col(j) = p.anchor.col(j) + (1.0 - gamma) * v;
        pair.eps.col(j) = p.anchor.col(j) - gamma * v;
        break;
      }
      case Pred::kVTrig:
        throw std::invalid_argument("vtrig prediction is not defined under a VP schedule");
    }
  }
  return pair;
}

Prediction convert_prediction(const Prediction& p, Pred to, const VpDiscreteSchedule& s,
                              bool clamp) {
  if (to == Pred::kVTrig)
    throw std::invalid_argument("vtrig target is not defined under a VP schedule");
  X0EpsPair pair = to_x0_eps(p, s, clamp);
  Eigen::RowVectorXd abar = abar_at_times(s, p.t);

  // Recover the x-space anchor regardless of the source anchoring.
  Tensor x_t(p.anchor.rows(), p.anchor.cols());
  for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
    double a = std::sqrt(abar(j));
    double b = std::sqrt(std::max(1.0 - abar(j), 1e-12));
    x_t.col(j) = (p.kind == Pred::kVRf) ? Tensor((a + b) * p.anchor.col(j)) : p.anchor.col(j);
  }

  Prediction out;
  out.kind = to;
  out.t = p.t;
  out.value.resize(p.value.rows(), p.value.cols());
  out.anchor.resize(p.anchor.rows(), p.anchor.cols());
  for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
    double a = std::sqrt(abar(j));
    double b = std::sqrt(std::max(1.0 - abar(j), 1e-12));
    auto x0 = pair.x0.col(j);
    auto eps = pair.eps.col(j);
    switch (to) {
      case Pred::kEps:
        out.value.col(j) = eps;
        break;
      case Pred::kX0:
      case Pred::kFCons:
        out.value.col(j) = x0;
        break;
      case Pred::kVDiff:
        out.value.col(j) = b * x0 - a * eps;
        break;
      case Pred::kVBar:
        out.value.col(j) = a * eps - b * x0;
        break;
      case Pred::kVRf:
        out.value.col(j) = x0 - eps;
        break;
      case Pred::kVTrig:
        break;  // rejected above
    }
    out.anchor.col(j) = (to == Pred::kVRf) ? Tensor(x_t.col(j) / (a + b)) : x_t.col(j);
  }
  return out;
}

Prediction convert_prediction(const Prediction& p, Pred to, const TrigSchedule& s) {
  check_shapes(p);
  auto supported = [](Pred k) { return k == Pred::kVTrig || k == Pred::kX0 || k == Pred::kEps; };
  if (!supported(p.kind) || !supported(to))
    throw std::invalid_argument("trig conversions support vtrig/x0/eps only");
  Prediction out;
  out.kind = to;
  out.t = p.t;
  out.anchor = p.anchor;
  out.value.resize(p.value.rows(), p.value.cols());
  for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
    double c = std::cos(p.t(j));
    double sn = std::sin(p.t(j));
    auto x = p.anchor.col(j);
    auto v = p.value.col(j);
    // Work through (x0, scaled-noise); conversions from x0/eps need a
    // nonzero sin/cos respectively.
    Eigen::VectorXd x0, en;
    switch (p.kind) {
      case Pred::kVTrig:
        x0 = c * x - sn * v;
        en = sn * x + c * v;
        break;
      case Pred::kX0: {
        if (std::abs(sn) < 1e-12)
          throw std::domain_error("trig conversion from x0 is singular at t = 0");
        x0 = v;
        en = (x - c * v) / sn;
        break;
      }
      default: {  // kEps: sigma-scaled noise estimate
        if (std::abs(c) < 1e-12)
          throw std::domain_error("trig conversion from eps is singular at t = pi/2");
        en = v;
        x0 = (x - sn * v) / c;
        break;
      }
    }
    switch (to) {
      case Pred::kVTrig:
        out.value.col(j) = c * en - sn * x0;
        break;
      case Pred::kX0:
        out.value.col(j) = x0;
        break;
      default:
        out.value.col(j) = en;
        break;
    }
  }
  return out;
}

Prediction convert_prediction(const Prediction& p, Pred to, const VeSchedule& s) {
  check_shapes(p);
  auto supported = [](Pred k) { return k == Pred::kFCons || k == Pred::kX0 || k == Pred::kEps; };
  if (!supported(p.kind) || !supported(to))
    throw std::invalid_argument("ve conversions support f/x0/eps only");
  Prediction out;
  out.kind = to;
  out.t = p.t;
  out.anchor = p.anchor;
  out.value.resize(p.value.rows(), p.value.cols());
  for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
    double b = std::max(s.noise_scale(p.t(j)), 1e-12);
    auto x = p.anchor.col(j);
    auto v = p.value.col(j);
    Eigen::VectorXd x0 =
        (p.kind == Pred::kEps) ? Eigen::VectorXd(x - b * v) : Eigen::VectorXd(v);
    if (to == Pred::kEps)
      out.value.col(j) = (x - x0) / b;
    else
      out.value.col(j) = x0;
  }
  return out;
}

Tensor score_from_prediction(const Prediction& p, const VpDiscreteSchedule& s, Pred via,
                             bool clamp) {
  if (via != Pred::kEps && via != Pred::kX0)
    throw std::invalid_argument("score_from_prediction: route must be eps or x0");
  Prediction q = convert_prediction(p, via, s, clamp);
  Eigen::RowVectorXd abar = abar_at_times(s, q.t);
  Tensor out(q.value.rows(), q.value.cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    double omb = 1.0 - abar(j);
    if (omb < 1e-12) {
      if (!clamp) throw std::domain_error("score at the abar = 1 boundary without clamp");
      omb = 1e-12;
    }
    if (via == Pred::kEps)
      out.col(j) = -q.value.col(j) / std::sqrt(omb);
    else
      out.col(j) = -(q.anchor.col(j) - std::sqrt(abar(j)) * q.value.col(j)) / omb;
  }
  return out;
}

HeadCoefs edm_head_coefs(const Eigen::VectorXd& t, const VeSchedule& s) {
  HeadCoefs h;
  h.c_skip.resize(t.size());
  h.c_out.resize(t.size());
  double sd = s.sigma_data;
  double e = s.epsilon_min;
  for (Eigen::Index j = 0; j < t.size(); ++j) {
    if (t(j) < e) throw std::out_of_range("edm head: t below epsilon_min");
    h.c_skip(j) = sd * sd / ((t(j) - e) * (t(j) - e) + sd * sd);
    h.c_out(j) = sd * (t(j) - e) / std::sqrt(t(j) * t(j) + sd * sd);
  }
  return h;
}

HeadCoefs lcm_head_coefs(const Eigen::VectorXd& t, double sigma_data) {
  HeadCoefs h;
  h.c_skip.resize(t.size());
  h.c_out.resize(t.size());
  for (Eigen::Index j = 0; j < t.size(); ++j) {
    if (t(j) < 0) throw std::out_of_range("lcm head: negative t");
    h.c_skip(j) = sigma_data * sigma_data / (t(j) * t(j) + sigma_data * sigma_data);
    h.c_out(j) = sigma_data * t(j) / std::sqrt(t(j) * t(j) + sigma_data * sigma_data);
  }
  return h;
}

Tensor consistency_head_edm(const Tensor& raw_x0, const Tensor& x_t, const Eigen::VectorXd& t,
                            const VeSchedule& s) {
  HeadCoefs h = edm_head_coefs(t, s);
  Tensor out(raw_x0.rows(), raw_x0.cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    out.col(j) = h.c_skip(j) * x_t.col(j) + h.c_out(j) * raw_x0.col(j);
  return out;
}

Tensor consistency_head_lcm(const Tensor& eps_hat, const Tensor& x_t, const Eigen::VectorXd& t,
                            const VpDiscreteSchedule& s, double sigma_data) {
  HeadCoefs h = lcm_head_coefs(t, sigma_data);
  Eigen::RowVectorXd abar = abar_at_times(s, t);
  Tensor out(eps_hat.rows(), eps_hat.cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    double a = std::sqrt(abar(j));
    double b = std::sqrt(std::max(1.0 - abar(j), 1e-12));
    Eigen::VectorXd x0 = (x_t.col(j) - b * eps_hat.col(j)) / a;
    out.col(j) = h.c_skip(j) * x_t.col(j) + h.c_out(j) * x0;
  }
  return out;
}

Tensor consistency_head_trig(const Tensor& raw_v, const Tensor& x_t, const Eigen::VectorXd& t,
                             const TrigSchedule& s) {
  Tensor out(raw_v.rows(), raw_v.cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j)
    out.col(j) = std::cos(t(j)) * x_t.col(j) - std::sin(t(j)) * s.sigma_data * raw_v.col(j);
  return out;
}

RfScaled rf_scale_sample(const Tensor& x_t, const Eigen::VectorXd& t,
                         const VpDiscreteSchedule& s) {
  Eigen::RowVectorXd abar = abar_at_times(s, t);
  RfScaled out;
  out.y.resize(x_t.rows(), x_t.cols());
  out.gamma.resize(x_t.cols());
  out.beta.resize(x_t.cols());
  for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
    double a = std::sqrt(abar(j));
    double b = std::sqrt(1.0 - abar(j));
    out.beta(j) = a + b;
    out.gamma(j) = a / out.beta(j);
    out.y.col(j) = x_t.col(j) / out.beta(j);
  }
  return out;
}

Tensor map_velocity_diffusion_to_rf(const Tensor& v_x, const Tensor& x_t,
                                    const Eigen::VectorXd& t, const VpDiscreteSchedule& s) {
  Eigen::RowVectorXd abar = abar_at_times(s, t);
  Tensor out(v_x.rows(), v_x.cols());
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    double a = std::sqrt(abar(j));
    double b = std::sqrt(1.0 - abar(j));
    double beta = a + b;
    out.col(j) = (v_x.col(j) * beta - x_t.col(j) * (b - a)) / (beta * beta);
  }
  return out;
}

Tensor velocity_from_score_unified(const Tensor& x_t, double t, const Tensor& score,
                                   const PathFns& path) {
  double al = path.alpha(t);
  if (al == 0.0) throw std::domain_error("velocity_from_score_unified: alpha(t) = 0");
  double dal = path.dalpha(t);
  double be = path.beta(t);
  double dbe = path.dbeta(t);
  return (dal / al) * x_t + be * (dal * be / al - dbe) * score;
}

}  // namespace dlab
