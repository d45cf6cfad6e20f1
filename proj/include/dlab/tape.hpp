#pragma once

#include <functional>
#include <stdexcept>
#include <vector>
#include <Eigen/Dense>

namespace dlab {

using Tensor = Eigen::MatrixXd;

namespace ad {

class GradientTape;

/// Lightweight handle to a node on a tape. Copies are cheap; the tape owns
/// all storage and must outlive its handles.
struct Var {
  GradientTape* tape = nullptr;
  int node = -1;

  bool valid() const { return tape != nullptr && node >= 0; }
  const Tensor& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

/// Record of a matrix-valued computation. Nodes are appended in evaluation
/// order, which is already a topological order, so reverse-mode is a single
/// backward sweep over the node list.
class GradientTape {
 public:
  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  Var constant(double value) { return leaf(Tensor::Constant(1, 1, value), false); }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape. `root` must be 1x1.
  void backward(const Var& root);

  const Tensor& value(const Var& v) const { return nodes_[check(v)].value; }
  /// Gradient accumulated by the last backward(); zeros if the node was
  /// never reached.
  Tensor grad(const Var& v) const;
  bool requires_grad(const Var& v) const { return nodes_[check(v)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Raw node construction, used by the operator library.
  using BackwardFn = std::function<void(GradientTape&, const Tensor& out_grad)>;
  Var make_node(Tensor value, bool requires_grad, BackwardFn fn);
  void accumulate(const Var& v, const Tensor& g);

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until first accumulation
    bool requires_grad = false;
    BackwardFn backward;
  };
  int check(const Var& v) const;
  std::vector<Node> nodes_;
};

// ---- operator library ------------------------------------------------
// All binary ops require operands on the same tape. Gradients flow only
// into operands created with requires_grad.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var neg(const Var& a);
Var cmul(const Var& a, const Var& b);        // elementwise
Var matmul(const Var& a, const Var& b);
Var add_colvec(const Var& a, const Var& b);  // b is (rows x 1), broadcast over columns
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var colwise_scale(const Var& a, const Eigen::RowVectorXd& w);  // column j scaled by w(j)
Var tanh_of(const Var& a);
Var exp_of(const Var& a);
Var log_of(const Var& a);
Var sqrt_of(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var log_sigmoid(const Var& a);  // -softplus(-x), numerically stable
Var sum_all(const Var& a);      // 1x1
Var mean_all(const Var& a);     // 1x1
Var colwise_sum(const Var& a);  // 1 x cols
Var vconcat(const std::vector<Var>& parts);  // stack along rows
Var detach(const Var& a);       // constant copy of the value

inline Var dot(const Var& a, const Var& b) { return sum_all(cmul(a, b)); }
inline Var colwise_squared_norm(const Var& a) { return colwise_sum(square(a)); }

/// Scalar hook for externally-differentiated functions: value() maps the
/// node's matrix to a scalar, grad() supplies d(value)/d(input). Used to
/// splice reward models into taped objectives.
Var custom_scalar(const Var& x, std::function<double(const Tensor&)> value,
                  std::function<Tensor(const Tensor&)> grad_fn);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

/// d(loss)/d(each of wrt), in order. Runs backward on `loss`.
std::vector<Tensor> compute_gradients(GradientTape& tape, const Var& loss,
                                      const std::vector<Var>& wrt);

/// Central-difference audit of an analytic gradient. `value` re-evaluates
/// the objective at the current parameter values; `analytic[i]` must match
/// d(value)/d(*params[i]). Every entry is probed.
struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  long entries = 0;
};
FdReport finite_difference_check(const std::vector<Tensor*>& params,
                                 const std::function<double()>& value,
                                 const std::vector<Tensor>& analytic,
                                 double base_step = 1e-5);

}  // namespace ad
}  // namespace dlab
