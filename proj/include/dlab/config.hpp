#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlab/net.hpp"
#include "dlab/reward.hpp"
#include "dlab/schedules.hpp"
#include "dlab/toyworld.hpp"
#include "dlab/training.hpp"

namespace dlab {

/// Raised for malformed run files; the message names the offending field by
/// its dotted path.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ScheduleConfig {
  int T = 1000;
  double beta_lo = 1e-4, beta_hi = 0.02;
  std::string beta_kind = "linear";
  double ve_eps_min = 0.002, ve_t_max = 80.0, ve_rho = 7.0;
  double sigma_data = 0.5;
  double rf_sigma_min = 1e-5;
};

struct DatasetConfig {
  std::string name = "two-mode";  // two-mode | ring | swiss-roll
  int modes = 8;
  double radius = 2.0;
  double sigma = 0.1;
  double center = 1.0;
  double two_mode_sigma = 0.2;
  double roll_noise = 0.05;
};

struct SampleRunConfig {
  std::string sampler = "ddim";
  int steps = 50;
  std::vector<int> taus;  // explicit grid; overrides `steps` when nonempty
  double eta = 0.0;
  double cfg_w = 0.0;
  int n = 1024;
  bool trace = false;
  double langevin_delta = 0.01;
  int langevin_steps = 200;
};

struct DistillRunConfig {
  std::string method = "cd";  // cd | pd | sds | vsd | dmd | add | rf
  int steps = 2000;
  int batch = 64;
  double lr = 1e-3;
  double momentum = 0.9;
  int grid = 18;       // consistency / rf teacher grid intervals
  int m = 1;           // teacher substeps per consistency target
  double huber_c = 0.0;
  double lambda = 1.0;
  bool guided = false;
  double w_lo = 0.0, w_hi = 0.0;
  int rounds = 1;           // progressive halvings
  int teacher_steps = 16;   // pd starting grid intervals
  int approach = 1;         // rf distillation variant
  std::vector<int> tau;     // dmd student grid (descending at sampling time)
  int log_every = 100;
};

struct EvalConfig {
  int n = 4096;
  int ref_n = 4096;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ScheduleConfig schedule;
  ModelSpec model;
  DatasetConfig data;
  TrainConfig train;
  SampleRunConfig sample;
  DistillRunConfig distill;
  FinetuneConfig finetune;
  int finetune_grid_steps = 10;  // builds finetune.taus when none given
  EvalConfig eval;
};

/// Parses and cross-checks a JSON run file. Unknown fields, wrong types and
/// out-of-range values all raise ConfigError naming the dotted field path.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

VpDiscreteSchedule make_vp(const ScheduleConfig& c);
VeSchedule make_ve(const ScheduleConfig& c);
RfSchedule make_rf(const ScheduleConfig& c);
TrigSchedule make_trig(const ScheduleConfig& c);

/// Closed-form target for datasets that have one; throws ConfigError for
/// empirical-only datasets (swiss-roll).
GmmOracle dataset_oracle(const DatasetConfig& c);
bool dataset_has_oracle(const DatasetConfig& c);
/// Fresh batch per step, addressed by (seed, step) so runs are reproducible.
DataFn make_data_fn(const DatasetConfig& c, std::uint64_t seed);

/// Pins the model's time-embedding domain to the schedule family implied by
/// its head (absolute steps, warped noise levels, angles or unit time).
void align_model_times(ModelSpec& spec, const ScheduleConfig& c);

}  // namespace dlab
