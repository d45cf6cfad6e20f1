#include "dlab/config.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include "json.hpp"

namespace dlab {
namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError("config: " + (path.empty() ? std::string("<root>") : path) + ": " + what);
}

std::string type_name(const json& j) {
  switch (j.type()) {
    case json::value_t::null: return "null";
    case json::value_t::object: return "an object";
    case json::value_t::array: return "an array";
    case json::value_t::string: return "a string";
    case json::value_t::boolean: return "a boolean";
    case json::value_t::number_integer:
    case json::value_t::number_unsigned:
    case json::value_t::number_float: return "a number";
    default: return "binary data";
  }
}

/// Typed field access inside one config object; every mismatch is reported
/// with the dotted path of the exact field.
class Section {
 public:
  Section(const json* obj, std::string prefix, std::initializer_list<const char*> allowed)
      : obj_(obj), prefix_(std::move(prefix)) {
    if (obj_ == nullptr) return;
    if (!obj_->is_object()) fail(prefix_, "expected an object, got " + type_name(*obj_));
    for (const auto& item : obj_->items()) {
      bool known = false;
      for (const char* k : allowed) known = known || item.key() == k;
      if (!known) fail(prefix_ + "." + item.key(), "unknown field");
    }
  }

  bool has(const char* key) const { return obj_ != nullptr && obj_->contains(key); }

  double number(const char* key, double fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_number()) fail(path(key), "expected a number, got " + type_name(*v));
    return v->get<double>();
  }

  int integer(const char* key, int fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_number_integer()) fail(path(key), "expected an integer, got " + type_name(*v));
    return v->get<int>();
  }

  std::uint64_t unsigned_integer(const char* key, std::uint64_t fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_number_integer() || (v->is_number_integer() && v->get<long long>() < 0))
      fail(path(key), "expected a non-negative integer, got " + type_name(*v));
    return v->get<std::uint64_t>();
  }

  bool boolean(const char* key, bool fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_boolean()) fail(path(key), "expected a boolean, got " + type_name(*v));
    return v->get<bool>();
  }

  std::string str(const char* key, const std::string& fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_string()) fail(path(key), "expected a string, got " + type_name(*v));
    return v->get<std::string>();
  }

  std::vector<int> int_list(const char* key, std::vector<int> fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_array()) fail(path(key), "expected an array of integers, got " + type_name(*v));
    std::vector<int> out;
    for (const auto& e : *v) {
      if (!e.is_number_integer())
        fail(path(key), "expected an array of integers, found " + type_name(e));
      out.push_back(e.get<int>());
    }
    return out;
  }

  std::string path(const char* key) const { return prefix_ + "." + key; }

 private:
  const json* find(const char* key) const {
    if (obj_ == nullptr || !obj_->contains(key)) return nullptr;
    return &obj_->at(key);
  }

  const json* obj_;
  std::string prefix_;
};

const json* subobject(const json& root, const char* key) {
  return root.contains(key) ? &root.at(key) : nullptr;
}

ScheduleConfig parse_schedule(const json* obj) {
  Section sec(obj, "schedule",
              {"T", "beta_lo", "beta_hi", "beta_kind", "ve_eps_min", "ve_t_max", "ve_rho",
               "sigma_data", "rf_sigma_min"});
  ScheduleConfig c;
  c.T = sec.integer("T", c.T);
  c.beta_lo = sec.number("beta_lo", c.beta_lo);
  c.beta_hi = sec.number("beta_hi", c.beta_hi);
  c.beta_kind = sec.str("beta_kind", c.beta_kind);
  c.ve_eps_min = sec.number("ve_eps_min", c.ve_eps_min);
  c.ve_t_max = sec.number("ve_t_max", c.ve_t_max);
  c.ve_rho = sec.number("ve_rho", c.ve_rho);
  c.sigma_data = sec.number("sigma_data", c.sigma_data);
  c.rf_sigma_min = sec.number("rf_sigma_min", c.rf_sigma_min);
  if (c.T < 1) fail("schedule.T", "must be at least 1");
  if (!(c.beta_lo > 0.0) || !(c.beta_lo <= c.beta_hi) || !(c.beta_hi < 1.0))
    fail("schedule.beta_lo", "need 0 < beta_lo <= beta_hi < 1");
  if (c.beta_kind != "linear" && c.beta_kind != "cosine")
    fail("schedule.beta_kind", "unknown kind '" + c.beta_kind + "'");
  if (!(c.ve_eps_min > 0.0) || !(c.ve_eps_min < c.ve_t_max))
    fail("schedule.ve_eps_min", "need 0 < ve_eps_min < ve_t_max");
  if (!(c.sigma_data > 0.0)) fail("schedule.sigma_data", "must be positive");
  return c;
}

ModelSpec parse_model(const json* obj) {
  Section sec(obj, "model",
              {"data_dim", "cond_dim", "hidden", "time_freqs", "head", "ema_decay",
               "sigma_data", "eps_min", "init_seed"});
  ModelSpec m;
  m.data_dim = sec.integer("data_dim", m.data_dim);
  m.cond_dim = sec.integer("cond_dim", m.cond_dim);
  m.hidden = sec.int_list("hidden", m.hidden);
  m.time_freqs = sec.integer("time_freqs", m.time_freqs);
  std::string head = sec.str("head", to_string(m.head));
  try {
    m.head = pred_from_string(head);
  } catch (const std::invalid_argument&) {
    fail("model.head", "unknown prediction kind '" + head + "'");
  }
  m.ema_decay = sec.number("ema_decay", m.ema_decay);
  m.sigma_data = sec.number("sigma_data", m.sigma_data);
  m.eps_min = sec.number("eps_min", m.eps_min);
  m.init_seed = sec.unsigned_integer("init_seed", m.init_seed);
  if (m.data_dim < 1) fail("model.data_dim", "must be at least 1");
  if (m.cond_dim < 0) fail("model.cond_dim", "must be non-negative");
  if (m.time_freqs < 0) fail("model.time_freqs", "must be non-negative");
  for (int h : m.hidden)
    if (h < 1) fail("model.hidden", "layer widths must be positive");
  if (!(m.ema_decay >= 0.0) || !(m.ema_decay < 1.0)) fail("model.ema_decay", "must lie in [0, 1)");
  return m;
}

DatasetConfig parse_data(const json* obj) {
  Section sec(obj, "data",
              {"name", "modes", "radius", "sigma", "center", "two_mode_sigma", "roll_noise"});
  DatasetConfig c;
  c.name = sec.str("name", c.name);
  c.modes = sec.integer("modes", c.modes);
  c.radius = sec.number("radius", c.radius);
  c.sigma = sec.number("sigma", c.sigma);
  c.center = sec.number("center", c.center);
  c.two_mode_sigma = sec.number("two_mode_sigma", c.two_mode_sigma);
  c.roll_noise = sec.number("roll_noise", c.roll_noise);
  if (c.name != "two-mode" && c.name != "ring" && c.name != "swiss-roll")
    fail("data.name", "unknown dataset '" + c.name + "'");
  if (c.modes < 1) fail("data.modes", "must be at least 1");
  if (!(c.sigma > 0.0)) fail("data.sigma", "must be positive");
  if (!(c.two_mode_sigma > 0.0)) fail("data.two_mode_sigma", "must be positive");
  return c;
}

TrainConfig parse_train(const json* obj) {
  Section sec(obj, "train",
              {"objective", "batch", "steps", "lr", "optimizer", "momentum", "weighting",
               "weight_scale", "huber_c", "ct_policy", "ct_grid", "ct_interval", "lambda_ct",
               "cond_dropout", "log_every"});
  TrainConfig c;
  c.objective = sec.str("objective", c.objective);
  c.batch = sec.integer("batch", c.batch);
  c.steps = sec.integer("steps", c.steps);
  c.lr = sec.number("lr", c.lr);
  c.optimizer = sec.str("optimizer", c.optimizer);
  c.momentum = sec.number("momentum", c.momentum);
  c.weighting = sec.str("weighting", c.weighting);
  c.weight_scale = sec.number("weight_scale", c.weight_scale);
  c.huber_c = sec.number("huber_c", c.huber_c);
  c.ct_policy = sec.str("ct_policy", c.ct_policy);
  c.ct_grid = sec.integer("ct_grid", c.ct_grid);
  c.ct_interval = sec.integer("ct_interval", c.ct_interval);
  c.lambda_ct = sec.number("lambda_ct", c.lambda_ct);
  c.cond_dropout = sec.number("cond_dropout", c.cond_dropout);
  c.log_every = sec.integer("log_every", c.log_every);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: train: " + std::string(e.what()));
  }
  return c;
}

SampleRunConfig parse_sample(const json* obj) {
  Section sec(obj, "sample",
              {"sampler", "steps", "taus", "eta", "cfg_w", "n", "trace", "langevin_delta",
               "langevin_steps"});
  SampleRunConfig c;
  c.sampler = sec.str("sampler", c.sampler);
  c.steps = sec.integer("steps", c.steps);
  c.taus = sec.int_list("taus", c.taus);
  c.eta = sec.number("eta", c.eta);
  c.cfg_w = sec.number("cfg_w", c.cfg_w);
  c.n = sec.integer("n", c.n);
  c.trace = sec.boolean("trace", c.trace);
  c.langevin_delta = sec.number("langevin_delta", c.langevin_delta);
  c.langevin_steps = sec.integer("langevin_steps", c.langevin_steps);
  static const char* known[] = {"ddpm", "ddpm-simplified", "ddim",     "smld", "cm",
                                "lcm",  "instaflow",       "trigflow", "rf"};
  bool ok = false;
  for (const char* k : known) ok = ok || c.sampler == k;
  if (!ok) fail("sample.sampler", "unknown sampler '" + c.sampler + "'");
  if (c.steps < 1) fail("sample.steps", "must be at least 1");
  if (c.n < 1) fail("sample.n", "must be at least 1");
  if (c.eta < 0.0) fail("sample.eta", "must be non-negative");
  return c;
}

DistillRunConfig parse_distill(const json* obj) {
  Section sec(obj, "distill",
              {"method", "steps", "batch", "lr", "momentum", "grid", "m", "huber_c", "lambda",
               "guided", "w_lo", "w_hi", "rounds", "teacher_steps", "approach", "tau",
               "log_every"});
  DistillRunConfig c;
  c.method = sec.str("method", c.method);
  c.steps = sec.integer("steps", c.steps);
  c.batch = sec.integer("batch", c.batch);
  c.lr = sec.number("lr", c.lr);
  c.momentum = sec.number("momentum", c.momentum);
  c.grid = sec.integer("grid", c.grid);
  c.m = sec.integer("m", c.m);
  c.huber_c = sec.number("huber_c", c.huber_c);
  c.lambda = sec.number("lambda", c.lambda);
  c.guided = sec.boolean("guided", c.guided);
  c.w_lo = sec.number("w_lo", c.w_lo);
  c.w_hi = sec.number("w_hi", c.w_hi);
  c.rounds = sec.integer("rounds", c.rounds);
  c.teacher_steps = sec.integer("teacher_steps", c.teacher_steps);
  c.approach = sec.integer("approach", c.approach);
  c.tau = sec.int_list("tau", c.tau);
  c.log_every = sec.integer("log_every", c.log_every);
  static const char* known[] = {"cd", "pd", "sds", "vsd", "dmd", "add", "rf"};
  bool ok = false;
  for (const char* k : known) ok = ok || c.method == k;
  if (!ok) fail("distill.method", "unknown method '" + c.method + "'");
  if (c.steps < 0) fail("distill.steps", "must be non-negative");
  if (c.batch < 1) fail("distill.batch", "must be at least 1");
  if (!(c.lr > 0.0)) fail("distill.lr", "must be positive");
  if (c.grid < 2) fail("distill.grid", "needs at least two grid intervals");
  if (c.m < 1) fail("distill.m", "must be at least 1");
  if (c.huber_c < 0.0) fail("distill.huber_c", "must be non-negative");
  if (c.guided && c.w_hi < c.w_lo) fail("distill.w_hi", "guidance range is empty");
  if (c.rounds < 1) fail("distill.rounds", "must be at least 1");
  if (c.approach != 1 && c.approach != 2) fail("distill.approach", "must be 1 or 2");
  return c;
}

FinetuneConfig parse_finetune(const json* obj, int* grid_steps) {
  Section sec(obj, "finetune",
              {"method", "taus", "sampler_steps", "K", "beta", "w_max", "baseline", "sampler",
               "steps", "batch", "lr", "momentum", "log_every"});
  FinetuneConfig c;
  c.method = sec.str("method", c.method);
  c.taus = sec.int_list("taus", c.taus);
  *grid_steps = sec.integer("sampler_steps", *grid_steps);
  c.K = sec.integer("K", c.K);
  c.beta = sec.number("beta", c.beta);
  c.w_max = sec.number("w_max", c.w_max);
  c.baseline = sec.str("baseline", c.baseline);
  c.sampler = sec.str("sampler", c.sampler);
  c.steps = sec.integer("steps", c.steps);
  c.batch = sec.integer("batch", c.batch);
  c.lr = sec.number("lr", c.lr);
  c.momentum = sec.number("momentum", c.momentum);
  c.log_every = sec.integer("log_every", c.log_every);
  if (*grid_steps < 1) fail("finetune.sampler_steps", "must be at least 1");
  // Grid-independent checks here; FinetuneConfig::validate runs once the
  // sampling grid is materialized against a concrete schedule.
  if (c.method != "refl" && c.method != "draft" && c.method != "qsm" && c.method != "ddpo" &&
      c.method != "drwr")
    fail("finetune.method", "unknown method '" + c.method + "'");
  if (c.K < 1) fail("finetune.K", "must be at least 1");
  if (!(c.w_max > 0.0)) fail("finetune.w_max", "must be positive");
  if (c.baseline != "none" && c.baseline != "mean")
    fail("finetune.baseline", "unknown baseline '" + c.baseline + "'");
  if (c.method == "ddpo" && c.sampler != "full")
    fail("finetune.sampler", "the likelihood-free update needs the stochastic sampler's step "
                             "densities; '" +
                                 c.sampler + "' does not record them");
  if (!(c.lr > 0.0)) fail("finetune.lr", "must be positive");
  if (c.steps < 0) fail("finetune.steps", "must be non-negative");
  if (c.batch < 1) fail("finetune.batch", "must be at least 1");
  return c;
}

EvalConfig parse_eval(const json* obj) {
  Section sec(obj, "eval", {"n", "ref_n"});
  EvalConfig c;
  c.n = sec.integer("n", c.n);
  c.ref_n = sec.integer("ref_n", c.ref_n);
  if (c.n < 2) fail("eval.n", "needs at least two samples");
  if (c.ref_n < 2) fail("eval.ref_n", "needs at least two samples");
  return c;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  json root = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (root.is_discarded()) throw ConfigError("config: not valid JSON");
  if (!root.is_object()) throw ConfigError("config: top level must be an object");
  static const char* sections[] = {"seed",   "schedule", "model",    "data", "train",
                                   "sample", "distill",  "finetune", "eval"};
  for (const auto& item : root.items()) {
    bool known = false;
    for (const char* k : sections) known = known || item.key() == k;
    if (!known) fail(item.key(), "unknown section");
  }

  RunConfig cfg;
  if (root.contains("seed")) {
    const json& s = root.at("seed");
    if (!s.is_number_integer() || s.get<long long>() < 0)
      fail("seed", "expected a non-negative integer, got " + type_name(s));
    cfg.seed = s.get<std::uint64_t>();
  }
  cfg.schedule = parse_schedule(subobject(root, "schedule"));
  cfg.model = parse_model(subobject(root, "model"));
  cfg.data = parse_data(subobject(root, "data"));
  cfg.train = parse_train(subobject(root, "train"));
  cfg.sample = parse_sample(subobject(root, "sample"));
  cfg.distill = parse_distill(subobject(root, "distill"));
  cfg.finetune = parse_finetune(subobject(root, "finetune"), &cfg.finetune_grid_steps);
  cfg.eval = parse_eval(subobject(root, "eval"));
  align_model_times(cfg.model, cfg.schedule);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

VpDiscreteSchedule make_vp(const ScheduleConfig& c) {
  return build_vp_schedule(c.T, c.beta_lo, c.beta_hi, c.beta_kind);
}

VeSchedule make_ve(const ScheduleConfig& c) {
  VeSchedule s;
  s.epsilon_min = c.ve_eps_min;
  s.T_max = c.ve_t_max;
  s.sigma_data = c.sigma_data;
  s.rho = c.ve_rho;
  return s;
}

RfSchedule make_rf(const ScheduleConfig& c) {
  RfSchedule s;
  s.sigma_min = c.rf_sigma_min;
  return s;
}

TrigSchedule make_trig(const ScheduleConfig& c) {
  TrigSchedule s;
  s.sigma_data = c.sigma_data;
  return s;
}

bool dataset_has_oracle(const DatasetConfig& c) { return c.name != "swiss-roll"; }

GmmOracle dataset_oracle(const DatasetConfig& c) {
  if (c.name == "two-mode") return GmmOracle::two_mode(c.center, c.two_mode_sigma);
  if (c.name == "ring") return GmmOracle::ring(c.modes, c.radius, c.sigma);
  throw ConfigError("config: data.name: '" + c.name + "' has no closed-form target");
}

DataFn make_data_fn(const DatasetConfig& c, std::uint64_t seed) {
  if (c.name == "swiss-roll") {
    double noise = c.roll_noise;
    return [noise, seed](int step, int n) {
      return swiss_roll(n, rng::key(seed, rng::kData, static_cast<std::uint64_t>(step), 0),
                        noise);
    };
  }
  GmmOracle g = dataset_oracle(c);
  return [g, seed](int step, int n) {
    return sample_gmm(g, n, rng::key(seed, rng::kData, static_cast<std::uint64_t>(step), 0));
  };
}

void align_model_times(ModelSpec& spec, const ScheduleConfig& c) {
  switch (spec.head) {
    case Pred::kFCons:
      spec.t_lo = c.ve_eps_min;
      spec.t_hi = c.ve_t_max;
      spec.eps_min = c.ve_eps_min;
      spec.sigma_data = c.sigma_data;
      break;
    case Pred::kVTrig:
      spec.t_lo = 0.0;
      spec.t_hi = M_PI / 2.0;
      spec.sigma_data = c.sigma_data;
      break;
    case Pred::kVRf:
      spec.t_lo = 0.0;
      spec.t_hi = 1.0;
      break;
    default:
      spec.t_lo = 0.0;
      spec.t_hi = static_cast<double>(c.T);
      break;
  }
}

}  // namespace dlab
