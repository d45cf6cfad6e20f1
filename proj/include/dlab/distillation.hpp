#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dlab/net.hpp"
#include "dlab/schedules.hpp"
#include "dlab/training.hpp"

namespace dlab {

/// Frozen teacher prediction function plus the trainable student. The
/// teacher may be a network or an analytic oracle; guidance weight `cfg_w`
/// applies to every teacher query.
struct TeacherStudentPair {
  Denoiser teacher;
  DenoiserModel* student = nullptr;
  double cfg_w = 0.0;

  bool heterogeneous() const {
    return student != nullptr && teacher.kind != student->spec().head;
  }
};

/// Deterministic m-step denoise from t_hi down to t_lo along an evenly
/// spaced integer sub-grid. m = 0 requires t_lo == t_hi and is the identity.
Tensor teacher_denoise(const Denoiser& teacher, const VpDiscreteSchedule& s, const Tensor& x,
                       int t_hi, int t_lo, const Tensor* cond, double w, int m);

/// Clean/noise estimates of a trainable network at (x_t, t) on the tape,
/// routed through the same head algebra as the plain conversions. The Var
/// overload lets gradients flow through x_t itself (chained sampler steps).
struct TapedX0Eps {
  ad::Var x0, eps;
};

TapedX0Eps taped_x0_eps(ad::GradientTape& tape, const DenoiserModel& model,
                        const DenoiserModel::Bound& bound, const ad::Var& x_t,
                        const Eigen::VectorXd& t, const Tensor* cond,
                        const VpDiscreteSchedule& s);
TapedX0Eps taped_x0_eps(ad::GradientTape& tape, const DenoiserModel& model,
                        const DenoiserModel::Bound& bound, const Tensor& x_t,
                        const Eigen::VectorXd& t, const Tensor* cond,
                        const VpDiscreteSchedule& s);

/// Clean-sample map of a consistency-distilled student: the boundary-
/// respecting head applied to the student's clean estimate. This is the same
/// map the distillation loss regresses, packaged for the few-step sampler.
/// Captures `student` and `s` by reference.
Denoiser lcm_denoiser(const DenoiserModel& student, const VpDiscreteSchedule& s,
                      bool use_ema = false);

/// Student clean-sample map at (x_hi, grid[idx + m]) regressed onto the
/// slow-weight map at the teacher's m-step denoise target. `idx` are 0-based
/// grid positions of the target time.
ad::Var loss_consistency_distillation(ad::GradientTape& tape, const TeacherStudentPair& pair,
                                      const DenoiserModel::Bound& student_bound,
                                      const Tensor& x0, const VpDiscreteSchedule& s,
                                      const std::vector<int>& grid, int m,
                                      const Eigen::VectorXi& idx, const Tensor& noise,
                                      const Tensor* cond = nullptr, double huber_c = 0.0,
                                      double lambda = 1.0);
ad::Var loss_consistency_distillation(ad::GradientTape& tape, const TeacherStudentPair& pair,
                                      const DenoiserModel::Bound& student_bound,
                                      const Tensor& x0, const VpDiscreteSchedule& s,
                                      const std::vector<int>& grid, int m, std::uint64_t seed,
                                      std::uint64_t step, const Tensor* cond = nullptr,
                                      double huber_c = 0.0, double lambda = 1.0);

struct DistillLoopConfig {
  int steps = 1000;
  int batch = 64;
  double lr = 1e-3;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  int log_every = 100;
};

std::vector<double> run_consistency_distillation(const TeacherStudentPair& pair,
                                                 const DataFn& data,
                                                 const VpDiscreteSchedule& s,
                                                 const std::vector<int>& grid, int m,
                                                 double huber_c,
                                                 const DistillLoopConfig& cfg);

// ---- progressive distillation -------------------------------------------

struct PdConfig {
  DistillLoopConfig loop;
  bool guided = false;
  double w_lo = 0.0, w_hi = 0.0;  // guidance range, drawn per sample
};

struct PdRound {
  std::vector<int> grid;  // student grid; half the teacher's interval count
  std::vector<double> loss;
};

/// One halving regression term on explicit draws: two teacher steps from the
/// diffused state form the target, the student must reach it in one step.
/// `iv` holds 1-based student-interval indices into `teacher_grid`; guided
/// weights `w` ride along as an extra student condition row.
ad::Var loss_progressive_distillation(ad::GradientTape& tape, const DenoiserModel& student,
                                      const DenoiserModel::Bound& bound,
                                      const Denoiser& teacher, const VpDiscreteSchedule& s,
                                      const Tensor& x0, const std::vector<int>& teacher_grid,
                                      const Eigen::VectorXi& iv, const Tensor& noise,
                                      const Tensor* cond = nullptr,
                                      const Eigen::VectorXd* w = nullptr);

/// One halving round: the student learns to match two teacher steps with
/// one of its own. In guided mode the drawn guidance weight is appended to
/// the student's condition rows. Returns the student grid for the next round.
PdRound progressive_distill_round(const Denoiser& teacher, DenoiserModel& student,
                                  const std::vector<int>& teacher_grid,
                                  const VpDiscreteSchedule& s, const DataFn& data,
                                  const PdConfig& cfg, const DataFn& cond = nullptr);

// ---- score-distillation generators ---------------------------------------

struct GeneratorGradient {
  std::vector<Tensor> grads;
  double surrogate = 0.0;  // scalar objective whose parameter gradient is `grads`
};

/// Pulls generator outputs toward the teacher's high-density regions:
/// gradient of mean w(t) (eps_teacher(x_t) - eps)^T G with x_t the diffused
/// generator output. No gradient flows through the teacher.
GeneratorGradient sds_gradient(const DenoiserModel& generator, const Tensor& latents,
                               const Denoiser& teacher, const VpDiscreteSchedule& s,
                               const Tensor* cond, double guidance_w,
                               const std::function<double(int)>& w_fn, const Eigen::VectorXi& t,
                               const Tensor& noise);
GeneratorGradient sds_gradient(const DenoiserModel& generator, const Tensor& latents,
                               const Denoiser& teacher, const VpDiscreteSchedule& s,
                               const Tensor* cond, double guidance_w,
                               const std::function<double(int)>& w_fn, std::uint64_t seed,
                               std::uint64_t step);

using ScoreFn = std::function<Tensor(const Tensor& x_t, const Eigen::VectorXi& t)>;

/// Replaces the SDS noise residual with the score gap between a trainable
/// distribution model and the real score, evaluated per time level.
GeneratorGradient vsd_gradient(const DenoiserModel& generator, const Tensor& latents,
                               const ScoreFn& real_score, const DenoiserModel& fake_model,
                               const VpDiscreteSchedule& s,
                               const std::function<double(int)>& w_fn, const Eigen::VectorXi& t,
                               const Tensor& noise);
GeneratorGradient vsd_gradient(const DenoiserModel& generator, const Tensor& latents,
                               const ScoreFn& real_score, const DenoiserModel& fake_model,
                               const VpDiscreteSchedule& s,
                               const std::function<double(int)>& w_fn, std::uint64_t seed,
                               std::uint64_t step);

// ---- distribution-matching distillation -----------------------------------

struct DmdState {
  DenoiserModel generator;   // clean-sample head queried on the student grid
  DenoiserModel fake_score;  // trainable noise-prediction copy of the teacher
  Tensor disc_w, disc_b;     // linear discriminator head on the fake trunk
  std::vector<int> tau = {249, 499, 749, 999};
  int teacher_lo = 1, teacher_hi = 999;
  double lambda_dm = 1.0, lambda_adv = 1.0;
};

DmdState make_dmd_state(const DenoiserModel& teacher, std::uint64_t seed);

struct DmdDiagnostics {
  double loss_dm = 0.0;        // distribution-matching generator term
  double loss_adv_gen = 0.0;   // adversarial generator term
  double loss_fake = 0.0;      // fake-score diffusion loss
  double loss_disc = 0.0;      // discriminator head loss
  double weight_mean = 0.0;
};

struct DmdGrads {
  std::vector<Tensor> generator, fake;
  Tensor disc_w, disc_b;
  DmdDiagnostics diag;
};

/// One coupled update: generator gradient from the weighted clean-estimate
/// gap plus the adversarial term, the fake-score model's diffusion loss on
/// detached generator samples, and the discriminator head's loss.
DmdGrads dmd_update(const DmdState& st, const Denoiser& teacher, const VpDiscreteSchedule& s,
                    const Tensor& real_x0, std::uint64_t seed, std::uint64_t step);

std::vector<DmdDiagnostics> run_dmd(DmdState& st, const Denoiser& teacher,
                                    const VpDiscreteSchedule& s, const DataFn& data,
                                    const DistillLoopConfig& cfg);

/// Few-step generation: query the generator along the descending grid,
/// renoising the clean estimate to the next level.
Tensor dmd_sample(const DenoiserModel& generator, const VpDiscreteSchedule& s,
                  const std::vector<int>& tau_desc, int n, std::uint64_t seed,
                  int base_index = 0);

// ---- adversarial distillation ---------------------------------------------

struct AddStudentLosses {
  ad::Var total, adversarial, distill;
};

/// Student-side objective: log D on the student's clean estimate plus
/// log(1 - D) on data (both under the student's min), and a teacher-matching
/// term on a rediffusion of the detached student estimate.
AddStudentLosses add_losses(ad::GradientTape& tape, const DenoiserModel& student,
                            const DenoiserModel::Bound& student_bound, const Denoiser& teacher,
                            const DenoiserModel& disc, const VpDiscreteSchedule& s,
                            const Tensor& x0, const std::vector<int>& grid, double lambda,
                            const Eigen::VectorXi& grid_idx, const Tensor& noise_s,
                            const Eigen::VectorXi& t_teacher, const Tensor& noise_t,
                            double huber_c = 0.0);
AddStudentLosses add_losses(ad::GradientTape& tape, const DenoiserModel& student,
                            const DenoiserModel::Bound& student_bound, const Denoiser& teacher,
                            const DenoiserModel& disc, const VpDiscreteSchedule& s,
                            const Tensor& x0, const std::vector<int>& grid, double lambda,
                            std::uint64_t seed, std::uint64_t step, double huber_c = 0.0);

/// The discriminator ascends the same adversarial expression; returns it as
/// a taped scalar of the discriminator parameters.
ad::Var add_disc_objective(ad::GradientTape& tape, const DenoiserModel& disc,
                           const DenoiserModel::Bound& disc_bound, const Tensor& student_x0hat,
                           const Tensor& real_x0);

// ---- rectified-flow distillation -------------------------------------------

/// Coupled (noise, clean) pairs from the deterministic teacher. Throws if a
/// stochastic sampler is requested.
std::pair<Tensor, Tensor> rf_teacher_pairs(const Denoiser& teacher, const VpDiscreteSchedule& s,
                                           const std::vector<int>& taus, double eta, int n,
                                           std::uint64_t seed, int base_index = 0);

/// Approach 2: the student's noise prediction is mapped to a velocity of the
/// rescaled trajectory and regressed against (x0 - eps) / (1 + 2 sqrt(abar)
/// sqrt(1 - abar)); states are built from the pair itself.
ad::Var rf_mapped_velocity_loss(ad::GradientTape& tape, const DenoiserModel& student,
                                const DenoiserModel::Bound& bound, const Tensor& eps,
                                const Tensor& x0_pair, const VpDiscreteSchedule& s,
                                const Eigen::VectorXi& t);

/// approach 1 trains a standalone straight-interpolant velocity net on the
/// pairs (see loss_rectified_flow); approach 2 reuses the teacher's own
/// parameterization through the velocity map.
ad::Var rf_distill_loss(ad::GradientTape& tape, const DenoiserModel& student,
                        const DenoiserModel::Bound& bound, int approach, const Tensor& eps,
                        const Tensor& x0_pair, const VpDiscreteSchedule& vp,
                        const RfSchedule& rf, std::uint64_t seed, std::uint64_t step);

}  // namespace dlab
