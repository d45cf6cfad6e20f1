#include "dlab/net.hpp"

#include <cmath>

namespace dlab {

Tensor time_features(const Eigen::VectorXd& t, double lo, double hi, int freqs) {
  Tensor out(2 * freqs, t.size());
  if (freqs == 0) return out;
  double span = hi - lo;
  if (span <= 0) throw std::invalid_argument("time_features: empty time domain");
  for (Eigen::Index j = 0; j < t.size(); ++j) {
    double p = 1000.0 * (t(j) - lo) / span;
    for (int k = 0; k < freqs; ++k) {
      double w = std::pow(10000.0, -static_cast<double>(k) / freqs);
      out(2 * k, j) = std::sin(p * w);
      out(2 * k + 1, j) = std::cos(p * w);
    }
  }
  return out;
}

Tensor time_features_dt(const Eigen::VectorXd& t, double lo, double hi, int freqs) {
  Tensor out(2 * freqs, t.size());
  if (freqs == 0) return out;
  double span = hi - lo;
  if (span <= 0) throw std::invalid_argument("time_features_dt: empty time domain");
  double dp = 1000.0 / span;
  for (Eigen::Index j = 0; j < t.size(); ++j) {
    double p = 1000.0 * (t(j) - lo) / span;
    for (int k = 0; k < freqs; ++k) {
      double w = std::pow(10000.0, -static_cast<double>(k) / freqs);
      out(2 * k, j) = std::cos(p * w) * w * dp;
      out(2 * k + 1, j) = -std::sin(p * w) * w * dp;
    }
  }
  return out;
}

DenoiserModel::DenoiserModel(ModelSpec spec) : spec_(std::move(spec)) {
  widths_.push_back(spec_.in_dim());
  for (int h : spec_.hidden) widths_.push_back(h);
  widths_.push_back(spec_.out_dim());
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    int fan_in = widths_[l];
    int fan_out = widths_[l + 1];
    Tensor wl = rng::normal_matrix(fan_out, fan_in, spec_.init_seed, rng::kParamInit,
                                   static_cast<uint64_t>(l)) /
                std::sqrt(static_cast<double>(fan_in));
    w.push_back(wl);
    b.push_back(Tensor::Zero(fan_out, 1));
  }
  ema_w = w;
  ema_b = b;
}

namespace {

Tensor assemble_input(const ModelSpec& spec, const Tensor& x, const Eigen::VectorXd& t,
                      const Tensor* cond) {
  if (x.rows() != spec.data_dim) throw std::invalid_argument("model input: data_dim mismatch");
  if (spec.time_freqs > 0 && t.size() != x.cols())
    throw std::invalid_argument("model input: one time value per sample required");
  if (cond != nullptr && cond->size() > 0 && spec.cond_dim == 0)
    throw std::invalid_argument("model input: condition passed to an unconditional model");
  Tensor in(spec.in_dim(), x.cols());
  in.topRows(spec.data_dim) = x;
  if (spec.time_freqs > 0)
    in.middleRows(spec.data_dim, 2 * spec.time_freqs) =
        time_features(t, spec.t_lo, spec.t_hi, spec.time_freqs);
  if (spec.cond_dim > 0) {
    if (cond != nullptr && cond->size() > 0) {
      if (cond->rows() != spec.cond_dim || cond->cols() != x.cols())
        throw std::invalid_argument("model input: condition shape mismatch");
      in.bottomRows(spec.cond_dim) = *cond;
    } else {
      in.bottomRows(spec.cond_dim).setZero();  // null token
    }
  }
  return in;
}

}  // namespace

Tensor DenoiserModel::operator()(const Tensor& x, const Eigen::VectorXd& t, const Tensor* cond,
                                 bool use_ema) const {
  const auto& W = use_ema ? ema_w : w;
  const auto& B = use_ema ? ema_b : b;
  Tensor h = assemble_input(spec_, x, t, cond);
  for (std::size_t l = 0; l < W.size(); ++l) {
    Tensor z = W[l] * h;
    z.colwise() += Eigen::VectorXd(B[l].col(0));
    if (l + 1 < W.size())
      h = z.array().tanh();
    else
      h = std::move(z);
  }
  return h;
}

DenoiserModel::Bound DenoiserModel::bind(ad::GradientTape& tape, bool trainable,
                                         bool use_ema) const {
  const auto& W = use_ema ? ema_w : w;
  const auto& B = use_ema ? ema_b : b;
  Bound bound;
  for (std::size_t l = 0; l < W.size(); ++l) {
    bound.params.push_back(tape.leaf(W[l], trainable));
    bound.params.push_back(tape.leaf(B[l], trainable));
  }
  return bound;
}

ad::Var DenoiserModel::forward_features(ad::GradientTape& tape, const Bound& bound,
                                        const ad::Var& x, const Eigen::VectorXd& t,
                                        const Tensor* cond) const {
  // Rebuild the same input block as the plain path; only the data rows carry
  // gradients.
  ad::Var h;
  if (spec_.time_freqs > 0 || spec_.cond_dim > 0) {
    std::vector<ad::Var> parts{x};
    if (spec_.time_freqs > 0)
      parts.push_back(tape.constant(time_features(t, spec_.t_lo, spec_.t_hi, spec_.time_freqs)));
    if (spec_.cond_dim > 0) {
      Tensor c;
      if (cond != nullptr && cond->size() > 0) {
        if (cond->rows() != spec_.cond_dim || cond->cols() != x.cols())
          throw std::invalid_argument("model input: condition shape mismatch");
        c = *cond;
      } else {
        c = Tensor::Zero(spec_.cond_dim, x.cols());
      }
      parts.push_back(tape.constant(std::move(c)));
    }
    h = ad::vconcat(parts);
  } else {
    h = x;
  }
  std::size_t layers = bound.params.size() / 2;
  for (std::size_t l = 0; l + 1 < layers; ++l)
    h = ad::tanh_of(ad::add_colvec(ad::matmul(bound.params[2 * l], h), bound.params[2 * l + 1]));
  return h;
}

ad::Var DenoiserModel::forward(ad::GradientTape& tape, const Bound& bound, const ad::Var& x,
                               const Eigen::VectorXd& t, const Tensor* cond) const {
  ad::Var h = forward_features(tape, bound, x, t, cond);
  std::size_t layers = bound.params.size() / 2;
  return ad::add_colvec(ad::matmul(bound.params[2 * (layers - 1)], h),
                        bound.params[2 * layers - 1]);
}

Tensor DenoiserModel::hidden_features(const Tensor& x, const Eigen::VectorXd& t,
                                      const Tensor* cond, bool use_ema) const {
  const auto& W = use_ema ? ema_w : w;
  const auto& B = use_ema ? ema_b : b;
  Tensor h = assemble_input(spec_, x, t, cond);
  for (std::size_t l = 0; l + 1 < W.size(); ++l) {
    Tensor z = W[l] * h;
    z.colwise() += Eigen::VectorXd(B[l].col(0));
    h = z.array().tanh();
  }
  return h;
}

std::pair<Tensor, Tensor> DenoiserModel::value_and_jvp(const Tensor& x, const Eigen::VectorXd& t,
                                                       const Tensor& x_dot, double t_dot,
                                                       const Tensor* cond, bool use_ema) const {
  const auto& W = use_ema ? ema_w : w;
  const auto& B = use_ema ? ema_b : b;
  Tensor h = assemble_input(spec_, x, t, cond);
  Tensor hd = Tensor::Zero(h.rows(), h.cols());
  hd.topRows(spec_.data_dim) = x_dot;
  if (spec_.time_freqs > 0)
    hd.middleRows(spec_.data_dim, 2 * spec_.time_freqs) =
        time_features_dt(t, spec_.t_lo, spec_.t_hi, spec_.time_freqs) * t_dot;
  for (std::size_t l = 0; l < W.size(); ++l) {
    Tensor z = W[l] * h;
    z.colwise() += Eigen::VectorXd(B[l].col(0));
    Tensor zd = W[l] * hd;
    if (l + 1 < W.size()) {
      h = z.array().tanh();
      hd = (1.0 - h.array().square()) * zd.array();
    } else {
      h = std::move(z);
      hd = std::move(zd);
    }
  }
  return {h, hd};
}

std::vector<Tensor*> DenoiserModel::params() {
  std::vector<Tensor*> out;
  for (std::size_t l = 0; l < w.size(); ++l) {
    out.push_back(&w[l]);
    out.push_back(&b[l]);
  }
  return out;
}

std::vector<const Tensor*> DenoiserModel::params() const {
  std::vector<const Tensor*> out;
  for (std::size_t l = 0; l < w.size(); ++l) {
    out.push_back(&w[l]);
    out.push_back(&b[l]);
  }
  return out;
}

std::vector<Tensor*> DenoiserModel::ema_params() {
  std::vector<Tensor*> out;
  for (std::size_t l = 0; l < ema_w.size(); ++l) {
    out.push_back(&ema_w[l]);
    out.push_back(&ema_b[l]);
  }
  return out;
}

long DenoiserModel::param_count() const {
  long n = 0;
  for (const auto& m : w) n += m.size();
  for (const auto& m : b) n += m.size();
  return n;
}

void DenoiserModel::ema_update() {
  double d = spec_.ema_decay;
  for (std::size_t l = 0; l < w.size(); ++l) {
    ema_w[l] = d * ema_w[l] + (1.0 - d) * w[l];
    ema_b[l] = d * ema_b[l] + (1.0 - d) * b[l];
  }
}

void DenoiserModel::copy_weights_to_ema() {
  ema_w = w;
  ema_b = b;
}

Tensor evaluate_network(const DenoiserModel& model, const Tensor& x, const Eigen::VectorXd& t,
                        const Tensor* cond, bool use_ema) {
  const ModelSpec& spec = model.spec();
  switch (spec.head) {
    case Pred::kVTrig: {
      double s = spec.sigma_data;
      return s * model(Tensor(x / s), t, cond, use_ema);
    }
    case Pred::kFCons: {
      Tensor raw = model(x, t, cond, use_ema);
      double sd = spec.sigma_data;
      double e = spec.eps_min;
      Tensor out(raw.rows(), raw.cols());
      for (Eigen::Index j = 0; j < raw.cols(); ++j) {
        double tj = t(j);
        double c_skip = sd * sd / ((tj - e) * (tj - e) + sd * sd);
        double c_out = sd * (tj - e) / std::sqrt(tj * tj + sd * sd);
        out.col(j) = c_skip * x.col(j) + c_out * raw.col(j);
      }
      return out;
    }
    default:
      return model(x, t, cond, use_ema);
  }
}

Denoiser as_denoiser(const DenoiserModel& model, bool use_ema) {
  Denoiser d;
  d.kind = model.spec().head;
  d.data_dim = model.spec().data_dim;
  d.cond_dim = model.spec().cond_dim;
  d.eval = [&model, use_ema](const Tensor& x, const Eigen::VectorXd& t, const Tensor* cond) {
    return evaluate_network(model, x, t, cond, use_ema);
  };
  return d;
}

std::vector<Tensor> compute_gradients(ad::GradientTape& tape, const ad::Var& loss,
                                      const DenoiserModel::Bound& bound) {
  return ad::compute_gradients(tape, loss, bound.params);
}

}  // namespace dlab
