#pragma once

#include <stdexcept>
#include <string>
#include <Eigen/Dense>

namespace dlab {

using Tensor = Eigen::MatrixXd;

/// What a network output (or an oracle) claims to estimate.
///  kEps    additive noise of the variance-preserving forward process
///  kX0     clean sample
///  kVDiff  diffusion velocity  v = sqrt(1-abar)*x0 - sqrt(abar)*eps
///  kVBar   forward-path velocity, the negation of kVDiff
///  kVRf    straight-line displacement  x0 - eps  (rectified-flow nets)
///  kFCons  consistency-function value, a clean-sample estimate with an
///          exact fixed point at the left time boundary
///  kVTrig  velocity of the trigonometric interpolation path
enum class Pred { kEps, kX0, kVDiff, kVBar, kVRf, kFCons, kVTrig };

/// A tagged network-or-oracle output together with the state it refers to.
/// `anchor` is x_t for every kind except kVRf, which anchors to the scaled
/// state y_t; `t` carries one time per column (absolute steps for the
/// variance-preserving family).
struct Prediction {
  Pred kind = Pred::kEps;
  Tensor value;
  Tensor anchor;
  Eigen::VectorXd t;
};

inline std::string to_string(Pred p) {
  switch (p) {
    case Pred::kEps: return "eps";
    case Pred::kX0: return "x0";
    case Pred::kVDiff: return "v";
    case Pred::kVBar: return "vbar";
    case Pred::kVRf: return "vrf";
    case Pred::kFCons: return "f";
    case Pred::kVTrig: return "vtrig";
  }
  return "?";
}

inline Pred pred_from_string(const std::string& s) {
  if (s == "eps") return Pred::kEps;
  if (s == "x0") return Pred::kX0;
  if (s == "v") return Pred::kVDiff;
  if (s == "vbar") return Pred::kVBar;
  if (s == "vrf") return Pred::kVRf;
  if (s == "f") return Pred::kFCons;
  if (s == "vtrig") return Pred::kVTrig;
  throw std::invalid_argument("unknown prediction kind: " + s);
}

}  // namespace dlab
