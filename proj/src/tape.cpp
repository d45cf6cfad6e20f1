#include "dlab/tape.hpp"

#include <cmath>
#include <utility>

namespace dlab::ad {

const Tensor& Var::value() const { return tape->value(*this); }

double Var::scalar() const {
  const Tensor& v = value();
  if (v.size() != 1) throw std::logic_error("Var::scalar: node is not 1x1");
  return v(0, 0);
}

int GradientTape::check(const Var& v) const {
  if (v.tape != this || v.node < 0 || v.node >= static_cast<int>(nodes_.size()))
    throw std::logic_error("GradientTape: handle does not belong to this tape");
  return v.node;
}

Var GradientTape::leaf(Tensor value, bool requires_grad) {
  return make_node(std::move(value), requires_grad, nullptr);
}

Var GradientTape::make_node(Tensor value, bool requires_grad, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void GradientTape::accumulate(const Var& v, const Tensor& g) {
  Node& n = nodes_[check(v)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

Tensor GradientTape::grad(const Var& v) const {
  const Node& n = nodes_[check(v)];
  if (n.grad.size() == 0) return Tensor::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void GradientTape::backward(const Var& root) {
  int r = check(root);
  if (nodes_[r].value.size() != 1)
    throw std::logic_error("GradientTape::backward: root must be a scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[r].grad = Tensor::Constant(1, 1, 1.0);
  for (int i = r; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0 || !n.backward || !n.requires_grad) continue;
    n.backward(*this, n.grad);
  }
}

namespace {

void same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw std::logic_error("ad op: operands on different tapes");
}

bool rg(const Var& v) { return v.tape->requires_grad(v); }

}  // namespace

Var add(const Var& a, const Var& b) {
  same_tape(a, b);
  bool need = rg(a) || rg(b);
  return a.tape->make_node(a.value() + b.value(), need,
                           need ? GradientTape::BackwardFn([a, b](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, g);
                             t.accumulate(b, g);
                           })
                                : GradientTape::BackwardFn());
}

Var sub(const Var& a, const Var& b) {
  same_tape(a, b);
  bool need = rg(a) || rg(b);
  return a.tape->make_node(a.value() - b.value(), need,
                           need ? GradientTape::BackwardFn([a, b](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, g);
                             t.accumulate(b, Tensor(-g));
                           })
                                : GradientTape::BackwardFn());
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var cmul(const Var& a, const Var& b) {
  same_tape(a, b);
  bool need = rg(a) || rg(b);
  return a.tape->make_node(a.value().cwiseProduct(b.value()), need,
                           need ? GradientTape::BackwardFn([a, b](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, g.cwiseProduct(b.value()));
                             t.accumulate(b, g.cwiseProduct(a.value()));
                           })
                                : GradientTape::BackwardFn());
}

Var matmul(const Var& a, const Var& b) {
  same_tape(a, b);
  bool need = rg(a) || rg(b);
  return a.tape->make_node(a.value() * b.value(), need,
                           need ? GradientTape::BackwardFn([a, b](GradientTape& t, const Tensor& g) {
                             if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
                             if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
                           })
                                : GradientTape::BackwardFn());
}

Var add_colvec(const Var& a, const Var& b) {
  same_tape(a, b);
  if (b.cols() != 1 || b.rows() != a.rows())
    throw std::logic_error("add_colvec: bias must be (rows x 1)");
  bool need = rg(a) || rg(b);
  Tensor v = a.value();
  v.colwise() += Eigen::VectorXd(b.value().col(0));
  return a.tape->make_node(std::move(v), need,
                           need ? GradientTape::BackwardFn([a, b](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, g);
                             t.accumulate(b, Tensor(g.rowwise().sum()));
                           })
                                : GradientTape::BackwardFn());
}

Var scale(const Var& a, double s) {
  bool need = rg(a);
  return a.tape->make_node(a.value() * s, need,
                           need ? GradientTape::BackwardFn([a, s](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, Tensor(g * s));
                           })
                                : GradientTape::BackwardFn());
}

Var add_scalar(const Var& a, double s) {
  bool need = rg(a);
  return a.tape->make_node(a.value().array() + s, need,
                           need ? GradientTape::BackwardFn([a](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, g);
                           })
                                : GradientTape::BackwardFn());
}

Var colwise_scale(const Var& a, const Eigen::RowVectorXd& w) {
  if (w.cols() != a.cols()) throw std::logic_error("colwise_scale: weight length mismatch");
  bool need = rg(a);
  Tensor v = a.value().array().rowwise() * w.array();
  return a.tape->make_node(std::move(v), need,
                           need ? GradientTape::BackwardFn([a, w](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, Tensor(g.array().rowwise() * w.array()));
                           })
                                : GradientTape::BackwardFn());
}

Var tanh_of(const Var& a) {
  bool need = rg(a);
  Tensor v = a.value().array().tanh();
  return a.tape->make_node(v, need,
                           need ? GradientTape::BackwardFn([a, v](GradientTape& t, const Tensor& g) {
                             Tensor d = 1.0 - v.array().square();
                             t.accumulate(a, Tensor(g.cwiseProduct(d)));
                           })
                                : GradientTape::BackwardFn());
}

Var exp_of(const Var& a) {
  bool need = rg(a);
  Tensor v = a.value().array().exp();
  return a.tape->make_node(v, need,
                           need ? GradientTape::BackwardFn([a, v](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, g.cwiseProduct(v));
                           })
                                : GradientTape::BackwardFn());
}

Var log_of(const Var& a) {
  bool need = rg(a);
  return a.tape->make_node(a.value().array().log(), need,
                           need ? GradientTape::BackwardFn([a](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, Tensor(g.cwiseQuotient(a.value())));
                           })
                                : GradientTape::BackwardFn());
}

Var sqrt_of(const Var& a) {
  bool need = rg(a);
  Tensor v = a.value().array().sqrt();
  return a.tape->make_node(v, need,
                           need ? GradientTape::BackwardFn([a, v](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, Tensor(g.array() * 0.5 / v.array()));
                           })
                                : GradientTape::BackwardFn());
}

Var square(const Var& a) {
  bool need = rg(a);
  return a.tape->make_node(a.value().array().square(), need,
                           need ? GradientTape::BackwardFn([a](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, Tensor(2.0 * g.cwiseProduct(a.value())));
                           })
                                : GradientTape::BackwardFn());
}

Var sigmoid(const Var& a) {
  bool need = rg(a);
  Tensor v = (1.0 / (1.0 + (-a.value().array()).exp()));
  return a.tape->make_node(v, need,
                           need ? GradientTape::BackwardFn([a, v](GradientTape& t, const Tensor& g) {
                             Tensor d = v.array() * (1.0 - v.array());
                             t.accumulate(a, Tensor(g.cwiseProduct(d)));
                           })
                                : GradientTape::BackwardFn());
}

Var log_sigmoid(const Var& a) {
  bool need = rg(a);
  // log sigmoid(x) = -softplus(-x) = min(x,0) - log1p(exp(-|x|))
  Tensor v = a.value().unaryExpr([](double x) {
    return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x)));
  });
  return a.tape->make_node(std::move(v), need,
                           need ? GradientTape::BackwardFn([a](GradientTape& t, const Tensor& g) {
                             Tensor d = a.value().unaryExpr([](double x) {
                               return 1.0 / (1.0 + std::exp(x));  // sigmoid(-x)
                             });
                             t.accumulate(a, Tensor(g.cwiseProduct(d)));
                           })
                                : GradientTape::BackwardFn());
}

Var sum_all(const Var& a) {
  bool need = rg(a);
  return a.tape->make_node(Tensor::Constant(1, 1, a.value().sum()), need,
                           need ? GradientTape::BackwardFn([a](GradientTape& t, const Tensor& g) {
                             t.accumulate(a, Tensor::Constant(a.rows(), a.cols(), g(0, 0)));
                           })
                                : GradientTape::BackwardFn());
}

Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

Var colwise_sum(const Var& a) {
  bool need = rg(a);
  return a.tape->make_node(Tensor(a.value().colwise().sum()), need,
                           need ? GradientTape::BackwardFn([a](GradientTape& t, const Tensor& g) {
                             Tensor full(a.rows(), a.cols());
                             full.rowwise() = g.row(0);
                             t.accumulate(a, full);
                           })
                                : GradientTape::BackwardFn());
}

Var vconcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::logic_error("vconcat: no parts");
  GradientTape* tape = parts[0].tape;
  Eigen::Index rows = 0;
  Eigen::Index cols = parts[0].cols();
  bool need = false;
  for (const Var& p : parts) {
    if (p.tape != tape) throw std::logic_error("vconcat: operands on different tapes");
    if (p.cols() != cols) throw std::logic_error("vconcat: column count mismatch");
    rows += p.rows();
    need = need || rg(p);
  }
  Tensor v(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return tape->make_node(std::move(v), need,
                         need ? GradientTape::BackwardFn([parts](GradientTape& t, const Tensor& g) {
                           Eigen::Index at = 0;
                           for (const Var& p : parts) {
                             t.accumulate(p, Tensor(g.middleRows(at, p.rows())));
                             at += p.rows();
                           }
                         })
                              : GradientTape::BackwardFn());
}

Var detach(const Var& a) { return a.tape->constant(a.value()); }

Var custom_scalar(const Var& x, std::function<double(const Tensor&)> value,
                  std::function<Tensor(const Tensor&)> grad_fn) {
  bool need = rg(x);
  double v = value(x.value());
  return x.tape->make_node(Tensor::Constant(1, 1, v), need,
                           need ? GradientTape::BackwardFn([x, grad_fn](GradientTape& t, const Tensor& g) {
                             t.accumulate(x, Tensor(g(0, 0) * grad_fn(x.value())));
                           })
                                : GradientTape::BackwardFn());
}

std::vector<Tensor> compute_gradients(GradientTape& tape, const Var& loss,
                                      const std::vector<Var>& wrt) {
  tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Var& v : wrt) out.push_back(tape.grad(v));
  return out;
}

FdReport finite_difference_check(const std::vector<Tensor*>& params,
                                 const std::function<double()>& value,
                                 const std::vector<Tensor>& analytic,
                                 double base_step) {
  if (params.size() != analytic.size())
    throw std::invalid_argument("finite_difference_check: size mismatch");
  FdReport rep;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p];
    if (analytic[p].rows() != w.rows() || analytic[p].cols() != w.cols())
      throw std::invalid_argument("finite_difference_check: gradient shape mismatch");
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      double saved = w(i);
      double h = base_step * std::max(1.0, std::abs(saved));
      w(i) = saved + h;
      double up = value();
      w(i) = saved - h;
      double dn = value();
      w(i) = saved;
      double fd = (up - dn) / (2.0 * h);
      double an = analytic[p](i);
      double abs_err = std::abs(fd - an);
      double rel = abs_err / std::max({std::abs(fd), std::abs(an), 1e-6});
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.entries;
    }
  }
  return rep;
}

}  // namespace dlab::ad
