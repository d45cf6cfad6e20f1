#include "dlab/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "dlab/checkpoint.hpp"
#include "dlab/distillation.hpp"
#include "dlab/parameterizations.hpp"
#include "dlab/reward.hpp"
#include "dlab/samplers.hpp"

namespace dlab {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void require_file(const std::string& path, const char* flag) {
  if (path.empty()) throw ConfigError(std::string(flag) + ": no path given");
  if (!fs::exists(path))
    throw ConfigError(std::string(flag) + ": cannot open '" + path + "'");
}

/// Metadata block embedded in every artifact: the resolved seed plus the run
/// file's JSON on one line.
std::vector<std::string> make_meta(const std::string& config_text, std::uint64_t seed) {
  std::vector<std::string> meta;
  meta.push_back("seed: " + std::to_string(seed));
  json j = json::parse(config_text, nullptr, /*allow_exceptions=*/false);
  meta.push_back("config: " + (j.is_discarded() ? std::string("{}") : j.dump()));
  return meta;
}

std::string curve_csv(const std::vector<std::string>& meta, const std::string& header,
                      const std::vector<std::string>& rows) {
  std::ostringstream os;
  for (const auto& m : meta) os << "# " << m << "\n";
  os << header << "\n";
  for (const auto& r : rows) os << r << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// sampling

std::vector<int> resolve_taus(const SampleRunConfig& sc, const VpDiscreteSchedule& vp) {
  if (!sc.taus.empty()) {
    std::vector<int> taus = sc.taus;
    std::sort(taus.begin(), taus.end());
    return taus;
  }
  return uniform_taus(vp.T, std::min(sc.steps, vp.T));
}

void check_head(const RunConfig& cfg, const DenoiserModel& model,
                std::initializer_list<Pred> allowed) {
  for (Pred p : allowed)
    if (model.spec().head == p) return;
  std::string opts;
  for (Pred p : allowed) opts += (opts.empty() ? "" : ", ") + to_string(p);
  throw ConfigError("sample.sampler: '" + cfg.sample.sampler + "' needs a net with head in {" +
                    opts + "}, checkpoint has '" + to_string(model.spec().head) + "'");
}

/// One contiguous chunk of columns, noise-addressed by absolute column index.
Tensor sampler_chunk(const RunConfig& cfg, const DenoiserModel& model, int batch,
                     std::uint64_t base_index, std::vector<Tensor>* states,
                     std::vector<double>* times) {
  const SampleRunConfig& sc = cfg.sample;
  VpDiscreteSchedule vp = make_vp(cfg.schedule);
  Denoiser den = as_denoiser(model);

  SamplerConfig run;
  run.eta = sc.eta;
  run.cfg_w = sc.cfg_w;
  run.seed = cfg.seed;
  run.batch = batch;
  run.base_index = base_index;

  auto finish_traj = [&](const Trajectory& traj) {
    if (states != nullptr) *states = traj.states;
    if (times != nullptr) *times = traj.times;
    return traj.final;
  };

  if (sc.sampler == "ddpm" || sc.sampler == "ddpm-simplified") {
    check_head(cfg, model, {Pred::kEps, Pred::kX0, Pred::kVDiff, Pred::kVBar});
    run.taus = full_range_taus(vp.T);
    DdpmVariant variant =
        sc.sampler == "ddpm" ? DdpmVariant::kFull : DdpmVariant::kSimplified;
    return finish_traj(ddpm_sample(den, vp, run, variant));
  }
  if (sc.sampler == "ddim") {
    check_head(cfg, model, {Pred::kEps, Pred::kX0, Pred::kVDiff, Pred::kVBar});
    run.taus = resolve_taus(sc, vp);
    return finish_traj(ddim_sample(den, vp, run));
  }
  if (sc.sampler == "lcm") {
    check_head(cfg, model, {Pred::kEps, Pred::kX0, Pred::kVDiff});
    run.taus = resolve_taus(sc, vp);
    Denoiser f = lcm_denoiser(model, vp);
    return finish_traj(lcm_sample(f, vp, run));
  }
  if (sc.sampler == "instaflow") {
    check_head(cfg, model, {Pred::kVRf});
    run.taus = resolve_taus(sc, vp);
    return finish_traj(instaflow_sample(den, vp, run, InstaFlowVariant::kFull));
  }
  if (sc.sampler == "cm") {
    check_head(cfg, model, {Pred::kFCons});
    return finish_traj(cm_multistep_sample(den, make_ve(cfg.schedule), sc.steps, run));
  }
  if (sc.sampler == "trigflow") {
    check_head(cfg, model, {Pred::kVTrig});
    return trigflow_sample(den, make_trig(cfg.schedule), uniform_trig_times(sc.steps), run);
  }
  if (sc.sampler == "rf") {
    check_head(cfg, model, {Pred::kVRf});
    return rf_euler_sample(den, make_rf(cfg.schedule), sc.steps, run);
  }
  if (sc.sampler == "smld") {
    check_head(cfg, model, {Pred::kEps, Pred::kX0, Pred::kVDiff, Pred::kVBar});
    auto score = [&den, &vp](const Tensor& x) {
      Eigen::VectorXd t1 = Eigen::VectorXd::Ones(x.cols());
      return score_from_prediction(Prediction{den.kind, den(x, t1), x, t1}, vp);
    };
    return smld_langevin_sample(score, sc.langevin_delta, sc.langevin_steps,
                                model.spec().data_dim, run);
  }
  throw ConfigError("sample.sampler: unknown sampler '" + sc.sampler + "'");
}

}  // namespace

void write_text_atomic(const std::string& path, const std::string& text) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cli: cannot write '" + tmp + "'");
    out << text;
    if (!out) throw std::runtime_error("cli: write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cli: cannot move '" + tmp + "' into place");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cli: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string samples_to_csv(const Tensor& x, const std::vector<std::string>& meta) {
  std::ostringstream os;
  for (const auto& m : meta) os << "# " << m << "\n";
  for (Eigen::Index i = 0; i < x.rows(); ++i) os << (i ? "," : "") << "x" << i;
  os << "\n";
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) os << (i ? "," : "") << fmt(x(i, j));
    os << "\n";
  }
  return os.str();
}

Tensor samples_from_csv(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ls, cell, ',')) {
      try {
        std::size_t used = 0;
        double v = std::stod(cell, &used);
        while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used])))
          ++used;
        if (used != cell.size()) throw std::invalid_argument(cell);
        row.push_back(v);
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) continue;  // header row
    if (!rows.empty() && row.size() != rows.front().size())
      throw std::runtime_error("cli: ragged csv row");
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("cli: csv holds no samples");
  Tensor out(rows.front().size(), rows.size());
  for (std::size_t j = 0; j < rows.size(); ++j)
    for (std::size_t i = 0; i < rows[j].size(); ++i)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[j][i];
  return out;
}

Tensor sample_batch(const RunConfig& cfg, const DenoiserModel& model, int threads,
                    std::vector<Tensor>* trace, std::vector<double>* trace_times) {
  const int n = cfg.sample.n;
  if (threads < 1) threads = 1;
  // The block decomposition is fixed regardless of `threads`: every network
  // evaluation sees the same column count, so the math cannot depend on how
  // the work is spread.
  constexpr int kBlockCols = 64;
  const int blocks = (n + kBlockCols - 1) / kBlockCols;

  Tensor out(model.spec().data_dim, n);
  std::vector<std::vector<Tensor>> block_states(trace != nullptr ? blocks : 0);
  std::vector<double> times;

  auto run_block = [&](int b) {
    int lo = b * kBlockCols;
    int width = std::min(kBlockCols, n - lo);
    std::vector<Tensor> st;
    std::vector<double> tm;
    Tensor part = sampler_chunk(cfg, model, width, static_cast<std::uint64_t>(lo),
                                trace != nullptr ? &st : nullptr,
                                trace != nullptr ? &tm : nullptr);
    out.middleCols(lo, width) = part;
    if (trace != nullptr) {
      block_states[b] = std::move(st);
      if (b == 0) times = std::move(tm);
    }
  };

  if (threads == 1 || blocks == 1) {
    for (int b = 0; b < blocks; ++b) run_block(b);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::string> errors(std::min(threads, blocks));
    for (std::size_t k = 0; k < errors.size(); ++k)
      pool.emplace_back([&, k]() {
        try {
          for (int b = next.fetch_add(1); b < blocks; b = next.fetch_add(1)) run_block(b);
        } catch (const std::exception& e) {
          errors[k] = e.what();
        }
      });
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (!e.empty()) throw std::runtime_error(e);
  }

  if (trace != nullptr) {
    trace->clear();
    if (!block_states.empty() && !block_states.front().empty()) {
      for (std::size_t step = 0; step < block_states.front().size(); ++step) {
        Tensor full(block_states.front()[step].rows(), n);
        for (int b = 0; b < blocks; ++b)
          full.middleCols(b * kBlockCols, std::min(kBlockCols, n - b * kBlockCols)) =
              block_states[b][step];
        trace->push_back(std::move(full));
      }
    }
    if (trace_times != nullptr) *trace_times = times;
  }
  return out;
}

// ---------------------------------------------------------------------------
// svg rendering

namespace {

struct Bounds {
  double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;

  void grow(double x, double y) {
    x_lo = std::min(x_lo, x);
    x_hi = std::max(x_hi, x);
    y_lo = std::min(y_lo, y);
    y_hi = std::max(y_hi, y);
  }
  void pad() {
    double mx = 0.05 * (x_hi - x_lo + 1e-9), my = 0.05 * (y_hi - y_lo + 1e-9);
    x_lo -= mx;
    x_hi += mx;
    y_lo -= my;
    y_hi += my;
  }
};

constexpr int kW = 640, kH = 640, kPad = 40;

double px(const Bounds& b, double x) {
  return kPad + (x - b.x_lo) / (b.x_hi - b.x_lo) * (kW - 2 * kPad);
}
double py(const Bounds& b, double y) {
  return kH - kPad - (y - b.y_lo) / (b.y_hi - b.y_lo) * (kH - 2 * kPad);
}

std::string svg_open(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\""
     << " font-size=\"14\">" << title << "</text>\n"
     << "<rect x=\"" << kPad << "\" y=\"" << kPad << "\" width=\"" << kW - 2 * kPad
     << "\" height=\"" << kH - 2 * kPad << "\" fill=\"none\" stroke=\"#888\"/>\n";
  return os.str();
}

}  // namespace

std::string svg_scatter(const Tensor& points, const std::string& title) {
  const bool one_d = points.rows() < 2;
  Bounds b;
  b.x_lo = b.y_lo = 1e300;
  b.x_hi = b.y_hi = -1e300;
  for (Eigen::Index j = 0; j < points.cols(); ++j) {
    double x = points(0, j);
    double y = one_d ? static_cast<double>(j) / std::max<Eigen::Index>(1, points.cols() - 1)
                     : points(1, j);
    b.grow(x, y);
  }
  b.pad();
  std::ostringstream os;
  os << svg_open(title);
  for (Eigen::Index j = 0; j < points.cols(); ++j) {
    double x = points(0, j);
    double y = one_d ? static_cast<double>(j) / std::max<Eigen::Index>(1, points.cols() - 1)
                     : points(1, j);
    os << "<circle cx=\"" << fmt(px(b, x)) << "\" cy=\"" << fmt(py(b, y))
       << "\" r=\"1.5\" fill=\"#1f77b4\" fill-opacity=\"0.5\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_trajectories(const std::vector<Tensor>& states,
                             const std::vector<double>& times, const std::string& title) {
  if (states.empty()) throw std::runtime_error("cli: no trajectory states to plot");
  const bool planar = states.front().rows() >= 2;
  const Eigen::Index n_show = std::min<Eigen::Index>(states.front().cols(), 32);

  Bounds b;
  b.x_lo = b.y_lo = 1e300;
  b.x_hi = b.y_hi = -1e300;
  for (std::size_t i = 0; i < states.size(); ++i) {
    for (Eigen::Index j = 0; j < n_show; ++j) {
      double x = planar ? states[i](0, j) : (i < times.size() ? times[i] : double(i));
      double y = planar ? states[i](1, j) : states[i](0, j);
      b.grow(x, y);
    }
  }
  b.pad();
  std::ostringstream os;
  os << svg_open(title);
  for (Eigen::Index j = 0; j < n_show; ++j) {
    os << "<polyline fill=\"none\" stroke=\"#d62728\" stroke-opacity=\"0.6\" "
          "stroke-width=\"1\" points=\"";
    for (std::size_t i = 0; i < states.size(); ++i) {
      double x = planar ? states[i](0, j) : (i < times.size() ? times[i] : double(i));
      double y = planar ? states[i](1, j) : states[i](0, j);
      os << fmt(px(b, x)) << "," << fmt(py(b, y)) << " ";
    }
    os << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// commands

namespace {

struct GlobalArgs {
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  std::string out_dir = ".";

  std::string resolve(const std::string& explicit_path, const std::string& fallback) const {
    if (!explicit_path.empty()) return explicit_path;
    return (fs::path(out_dir) / fallback).string();
  }
};

RunConfig load_config_with_overrides(const std::string& path, const GlobalArgs& g,
                                     std::string* text_out) {
  std::string text = path.empty() ? std::string("{}") : read_text(path);
  RunConfig rc = parse_run_config(text);
  if (g.seed_set) rc.seed = g.seed;
  if (text_out != nullptr) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) j = json::object();
    j["seed"] = rc.seed;
    *text_out = j.dump();
  }
  return rc;
}

/// Schedule/model sections recorded in a checkpoint note, if any; keeps
/// `sample` usable without repeating the training config.
void absorb_checkpoint_note(const std::string& note, RunConfig* rc) {
  if (note.empty()) return;
  json j = json::parse(note, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("schedule")) return;
  json pruned = json::object();
  pruned["schedule"] = j["schedule"];
  try {
    RunConfig from_note = parse_run_config(pruned.dump());
    rc->schedule = from_note.schedule;
  } catch (const ConfigError&) {
  }
}

int cmd_train(const std::string& config_path, const std::string& out,
              const std::string& curve, const GlobalArgs& g) {
  require_file(config_path, "--config");
  std::string resolved;
  RunConfig rc = load_config_with_overrides(config_path, g, &resolved);

  VpDiscreteSchedule vp = make_vp(rc.schedule);
  VeSchedule ve = make_ve(rc.schedule);
  RfSchedule rf = make_rf(rc.schedule);
  TrigSchedule trig = make_trig(rc.schedule);

  ModelSpec spec = rc.model;
  if (spec.init_seed == 0) spec.init_seed = rng::key(rc.seed, rng::kParamInit, 0, 0);
  DenoiserModel model(spec);

  TrainConfig tc = rc.train;
  tc.seed = rc.seed;
  TrainContext ctx;
  ctx.vp = &vp;
  ctx.ve = &ve;
  ctx.rf = &rf;
  ctx.trig = &trig;
  TrainReport rep = train(model, make_data_fn(rc.data, rc.seed), tc, ctx);

  std::vector<std::string> rows;
  for (std::size_t i = 0; i < rep.step.size(); ++i)
    rows.push_back(std::to_string(rep.step[i]) + "," + fmt(rep.loss[i]) + "," +
                   fmt(rep.smoothed[i]));
  write_text_atomic(g.resolve(curve, "train_curve.csv"),
                    curve_csv(make_meta(resolved, rc.seed), "step,loss,ema_loss", rows));
  save_checkpoint(g.resolve(out, "model.ckpt"), model, resolved);
  return 0;
}

int cmd_sample(const std::string& model_path, const std::string& config_path,
               const std::string& algorithm, int steps, double eta, double cfg_w, int n,
               bool trace, const std::string& out, const GlobalArgs& g) {
  require_file(model_path, "--model");
  if (!config_path.empty()) require_file(config_path, "--config");
  std::string resolved;
  RunConfig rc = load_config_with_overrides(config_path, g, &resolved);
  if (config_path.empty()) absorb_checkpoint_note(checkpoint_note(model_path), &rc);
  if (!algorithm.empty()) rc.sample.sampler = algorithm;
  if (steps > 0) rc.sample.steps = steps;
  if (eta >= 0.0) rc.sample.eta = eta;
  rc.sample.cfg_w = cfg_w;
  if (n > 0) rc.sample.n = n;
  rc.sample.trace = trace || rc.sample.trace;
  {
    // re-validate the merged sampler section through the config checks
    json probe = {{"sample",
                   {{"sampler", rc.sample.sampler},
                    {"steps", rc.sample.steps},
                    {"n", rc.sample.n},
                    {"eta", rc.sample.eta}}}};
    parse_run_config(probe.dump());
  }

  DenoiserModel model = load_checkpoint(model_path);
  std::vector<Tensor> states;
  std::vector<double> times;
  Tensor x = sample_batch(rc, model, g.threads, rc.sample.trace ? &states : nullptr,
                          rc.sample.trace ? &times : nullptr);

  std::vector<std::string> meta = make_meta(resolved, rc.seed);
  meta.push_back("algorithm: " + rc.sample.sampler);
  std::string out_path = g.resolve(out, "samples.csv");
  write_text_atomic(out_path, samples_to_csv(x, meta));

  if (rc.sample.trace && !states.empty()) {
    std::ostringstream os;
    for (const auto& m : meta) os << "# " << m << "\n";
    os << "time,sample";
    for (Eigen::Index i = 0; i < x.rows(); ++i) os << ",x" << i;
    os << "\n";
    for (std::size_t s = 0; s < states.size(); ++s)
      for (Eigen::Index j = 0; j < states[s].cols(); ++j) {
        os << fmt(s < times.size() ? times[s] : double(s)) << "," << j;
        for (Eigen::Index i = 0; i < states[s].rows(); ++i) os << "," << fmt(states[s](i, j));
        os << "\n";
      }
    write_text_atomic(out_path + ".trace.csv", os.str());
  }
  return 0;
}

int cmd_distill(const std::string& method_flag, const std::string& teacher_path,
                const std::string& config_path, const std::string& out,
                const std::string& curve, const GlobalArgs& g) {
  require_file(teacher_path, "--teacher");
  if (!config_path.empty()) require_file(config_path, "--config");
  std::string resolved;
  RunConfig rc = load_config_with_overrides(config_path, g, &resolved);
  if (config_path.empty()) absorb_checkpoint_note(checkpoint_note(teacher_path), &rc);

  std::string method = method_flag.empty() ? rc.distill.method : method_flag;
  bool guided = rc.distill.guided;
  int approach = rc.distill.approach;
  if (method == "guided-pd") {
    method = "pd";
    guided = true;
  } else if (method == "rf1" || method == "rf2") {
    approach = method == "rf1" ? 1 : 2;
    method = "rf";
  }
  static const char* known[] = {"cd", "pd", "sds", "vsd", "dmd", "add", "rf"};
  if (std::none_of(std::begin(known), std::end(known),
                   [&](const char* k) { return method == k; }))
    throw ConfigError("--method: unknown method '" + method_flag + "'");

  VpDiscreteSchedule vp = make_vp(rc.schedule);
  DenoiserModel teacher_model = load_checkpoint(teacher_path);
  Denoiser teacher = as_denoiser(teacher_model);
  DataFn data = make_data_fn(rc.data, rc.seed);
  const DistillRunConfig& dc = rc.distill;
  DistillLoopConfig loop;
  loop.steps = dc.steps;
  loop.batch = dc.batch;
  loop.lr = dc.lr;
  loop.momentum = dc.momentum;
  loop.seed = rc.seed;
  loop.log_every = dc.log_every;

  std::vector<std::string> rows;
  std::string header = "step,loss";
  std::string out_path = g.resolve(out, "student.ckpt");
  auto meta = make_meta(resolved, rc.seed);
  meta.push_back("method: " + method);

  if (method == "cd") {
    DenoiserModel student = teacher_model;
    TeacherStudentPair pair{teacher, &student, 0.0};
    std::vector<int> grid = uniform_taus(vp.T, dc.grid);
    std::vector<double> losses =
        run_consistency_distillation(pair, data, vp, grid, dc.m, dc.huber_c, loop);
    for (std::size_t i = 0; i < losses.size(); ++i)
      rows.push_back(std::to_string(i) + "," + fmt(losses[i]));
    save_checkpoint(out_path, student, resolved);
  } else if (method == "pd") {
    PdConfig pd;
    pd.loop = loop;
    pd.guided = guided;
    pd.w_lo = dc.w_lo;
    pd.w_hi = dc.w_hi;
    std::vector<int> grid = uniform_taus(vp.T, dc.teacher_steps);
    std::vector<DenoiserModel> generations;
    generations.push_back(teacher_model);
    if (guided) {
      ModelSpec spec = teacher_model.spec();
      spec.cond_dim += 1;  // guidance weight rides along as a condition row
      spec.init_seed = rng::key(rc.seed, rng::kParamInit, 1, 0);
      generations.back() = DenoiserModel(spec);
    }
    header = "round,step,loss";
    for (int r = 0; r < dc.rounds; ++r) {
      DenoiserModel student = generations.back();
      Denoiser round_teacher =
          r == 0 ? teacher : as_denoiser(generations.back());
      PdRound res = progressive_distill_round(round_teacher, student, grid, vp, data, pd);
      for (std::size_t i = 0; i < res.loss.size(); ++i)
        rows.push_back(std::to_string(r) + "," + std::to_string(i) + "," + fmt(res.loss[i]));
      grid = res.grid;
      generations.push_back(student);
    }
    save_checkpoint(out_path, generations.back(), resolved);
  } else if (method == "sds" || method == "vsd") {
    ModelSpec gspec;
    gspec.data_dim = teacher_model.spec().data_dim;
    gspec.hidden = teacher_model.spec().hidden;
    gspec.time_freqs = 0;
    gspec.head = Pred::kX0;
    gspec.init_seed = rng::key(rc.seed, rng::kParamInit, 2, 0);
    DenoiserModel generator(gspec);
    DenoiserModel fake = teacher_model;  // vsd's trainable distribution model
    auto w_fn = make_weighting("sigma2", vp, gspec.data_dim, 1.0);
    ScoreFn real_score = [&teacher, &vp](const Tensor& x_t, const Eigen::VectorXi& t) {
      Eigen::VectorXd td = t.cast<double>();
      return score_from_prediction(Prediction{teacher.kind, teacher(x_t, td), x_t, td}, vp);
    };
    Optimizer gen_opt = Optimizer::sgd(loop.lr, loop.momentum);
    Optimizer fake_opt = Optimizer::sgd(loop.lr, loop.momentum);
    for (int step = 0; step < loop.steps; ++step) {
      Tensor z = rng::normal_matrix(gspec.data_dim, loop.batch, rc.seed, rng::kInit, step);
      GeneratorGradient gg =
          method == "sds"
              ? sds_gradient(generator, z, teacher, vp, nullptr, dc.w_lo, w_fn, rc.seed, step)
              : vsd_gradient(generator, z, real_score, fake, vp, w_fn, rc.seed, step);
      if (!std::isfinite(gg.surrogate))
        throw std::runtime_error("distillation: non-finite generator objective");
      gen_opt.step(generator.params(), gg.grads);
      generator.ema_update();
      double fake_loss = 0.0;
      if (method == "vsd") {
        Eigen::VectorXd t0 = Eigen::VectorXd::Zero(loop.batch);
        Tensor x_fake = generator(z, t0);
        ad::GradientTape tape;
        DenoiserModel::Bound fb = fake.bind(tape, /*trainable=*/true);
        ad::Var fl =
            loss_diffusion(tape, fake, fb, x_fake, nullptr, vp, Pred::kEps, rc.seed, step);
        fake_opt.step(fake.params(), compute_gradients(tape, fl, fb));
        fake.ema_update();
        fake_loss = fl.scalar();
      }
      rows.push_back(std::to_string(step) + "," + fmt(gg.surrogate) + "," + fmt(fake_loss));
    }
    header = "step,surrogate,fake_loss";
    save_checkpoint(out_path, generator, resolved);
  } else if (method == "dmd") {
    DmdState st = make_dmd_state(teacher_model, rc.seed);
    if (!dc.tau.empty()) {
      st.tau = dc.tau;
      std::sort(st.tau.begin(), st.tau.end());
    }
    std::vector<DmdDiagnostics> hist = run_dmd(st, teacher, vp, data, loop);
    header = "step,loss_dm,loss_adv_gen,loss_fake,loss_disc,weight_mean";
    for (std::size_t i = 0; i < hist.size(); ++i)
      rows.push_back(std::to_string(i) + "," + fmt(hist[i].loss_dm) + "," +
                     fmt(hist[i].loss_adv_gen) + "," + fmt(hist[i].loss_fake) + "," +
                     fmt(hist[i].loss_disc) + "," + fmt(hist[i].weight_mean));
    save_checkpoint(out_path, st.generator, resolved);
  } else if (method == "add") {
    DenoiserModel student = teacher_model;
    ModelSpec dspec;
    dspec.data_dim = teacher_model.spec().data_dim;
    dspec.hidden = teacher_model.spec().hidden;
    dspec.time_freqs = 0;
    dspec.out_channels = 1;
    dspec.init_seed = rng::key(rc.seed, rng::kParamInit, 3, 0);
    DenoiserModel disc(dspec);
    std::vector<int> full = uniform_taus(vp.T, dc.grid);
    std::vector<int> grid(full.begin() + 1, full.end());  // student levels, no t = 0
    Optimizer student_opt = Optimizer::sgd(loop.lr, loop.momentum);
    Optimizer disc_opt = Optimizer::sgd(loop.lr, loop.momentum);
    header = "step,total,adversarial,distill,disc";
    for (int step = 0; step < loop.steps; ++step) {
      Tensor x0 = data(step, loop.batch);
      ad::GradientTape tape;
      DenoiserModel::Bound sb = student.bind(tape, /*trainable=*/true);
      AddStudentLosses L =
          add_losses(tape, student, sb, teacher, disc, vp, x0, grid, dc.lambda, rc.seed,
                     step, dc.huber_c);
      if (!std::isfinite(L.total.scalar()))
        throw std::runtime_error("distillation: non-finite adversarial objective");
      student_opt.step(student.params(), compute_gradients(tape, L.total, sb));
      student.ema_update();

      // discriminator ascends on the student's detached estimates
      Eigen::VectorXi idx = rng::uniform_int_vector(
          x0.cols(), 0, static_cast<int>(grid.size()) - 1, rc.seed, rng::kTime, 2 * step);
      Tensor noise =
          rng::normal_matrix(x0.rows(), x0.cols(), rc.seed, rng::kLossNoise, 2 * step);
      Tensor x_s = x0;
      Eigen::VectorXd ts(x0.cols());
      for (Eigen::Index j = 0; j < x0.cols(); ++j) {
        int t = grid[idx(j)];
        ts(j) = t;
        x_s.col(j) = vp.a(t) * x0.col(j) + vp.b(t) * noise.col(j);
      }
      Denoiser sden = as_denoiser(student);
      Tensor xhat =
          to_x0_eps(Prediction{sden.kind, sden(x_s, ts), x_s, ts}, vp, /*clamp=*/true).x0;
      ad::GradientTape dtape;
      DenoiserModel::Bound db = disc.bind(dtape, /*trainable=*/true);
      ad::Var dobj = add_disc_objective(dtape, disc, db, xhat, x0);
      std::vector<Tensor> dgrads = compute_gradients(dtape, dobj, db);
      for (auto& gmat : dgrads) gmat = -gmat;  // ascend
      disc_opt.step(disc.params(), dgrads);
      rows.push_back(std::to_string(step) + "," + fmt(L.total.scalar()) + "," +
                     fmt(L.adversarial.scalar()) + "," + fmt(L.distill.scalar()) + "," +
                     fmt(dobj.scalar()));
    }
    save_checkpoint(out_path, student, resolved);
  } else {  // rf
    RfSchedule rfs = make_rf(rc.schedule);
    DenoiserModel student = teacher_model;
    if (approach == 1) {
      ModelSpec spec = teacher_model.spec();
      spec.head = Pred::kVRf;
      spec.t_lo = 0.0;
      spec.t_hi = 1.0;
      spec.init_seed = rng::key(rc.seed, rng::kParamInit, 4, 0);
      student = DenoiserModel(spec);
    }
    std::vector<int> taus = uniform_taus(vp.T, dc.teacher_steps);
    Optimizer opt = Optimizer::sgd(loop.lr, loop.momentum);
    for (int step = 0; step < loop.steps; ++step) {
      auto pairs = rf_teacher_pairs(teacher, vp, taus, 0.0, loop.batch,
                                    rng::key(rc.seed, rng::kData, step, 0));
      ad::GradientTape tape;
      DenoiserModel::Bound bound = student.bind(tape, /*trainable=*/true);
      ad::Var L = rf_distill_loss(tape, student, bound, approach, pairs.first, pairs.second,
                                  vp, rfs, rc.seed, step);
      if (!std::isfinite(L.scalar()))
        throw std::runtime_error("distillation: non-finite rectified-flow objective");
      opt.step(student.params(), compute_gradients(tape, L, bound));
      student.ema_update();
      rows.push_back(std::to_string(step) + "," + fmt(L.scalar()));
    }
    save_checkpoint(out_path, student, resolved);
  }

  write_text_atomic(g.resolve(curve, "distill_curve.csv"), curve_csv(meta, header, rows));
  return 0;
}

int cmd_finetune(const std::string& method_flag, const std::string& model_path,
                 const std::string& reward_tag, const std::string& config_path,
                 const std::string& out, const std::string& curve, const GlobalArgs& g) {
  require_file(model_path, "--model");
  if (!config_path.empty()) require_file(config_path, "--config");
  std::string resolved;
  RunConfig rc = load_config_with_overrides(config_path, g, &resolved);
  if (config_path.empty()) absorb_checkpoint_note(checkpoint_note(model_path), &rc);

  VpDiscreteSchedule vp = make_vp(rc.schedule);
  DenoiserModel model = load_checkpoint(model_path);

  FinetuneConfig fc = rc.finetune;
  if (!method_flag.empty()) fc.method = method_flag;
  fc.seed = rc.seed;
  if (fc.taus.empty()) fc.taus = uniform_taus(vp.T, rc.finetune_grid_steps);

  RewardModel reward;
  if (reward_tag == "coordinate") {
    reward = reward_coordinate(0);
  } else if (reward_tag == "neg-sq-dist") {
    reward = reward_neg_sq_dist(Eigen::VectorXd::Zero(model.spec().data_dim));
  } else if (reward_tag == "gmm") {
    reward = reward_gmm_log_density(dataset_oracle(rc.data), vp);
  } else {
    throw ConfigError("--reward: unknown reward '" + reward_tag + "'");
  }

  FinetuneReport rep = finetune(model, reward, vp, fc, make_data_fn(rc.data, rc.seed));
  std::vector<std::string> rows;
  for (std::size_t i = 0; i < rep.step.size(); ++i)
    rows.push_back(std::to_string(rep.step[i]) + "," + fmt(rep.mean_reward[i]) + "," +
                   fmt(rep.loss[i]));
  auto meta = make_meta(resolved, rc.seed);
  meta.push_back("method: " + fc.method);
  meta.push_back("reward: " + reward_tag);
  write_text_atomic(g.resolve(curve, "finetune_curve.csv"),
                    curve_csv(meta, "step,mean_reward,loss", rows));
  save_checkpoint(g.resolve(out, "finetuned.ckpt"), model, resolved);
  return 0;
}

int cmd_eval(const std::string& samples_path, const std::string& target,
             const std::string& config_path, const std::string& out, const GlobalArgs& g) {
  require_file(samples_path, "--samples");
  if (!config_path.empty()) require_file(config_path, "--config");
  std::string resolved;
  RunConfig rc = load_config_with_overrides(config_path, g, &resolved);
  if (!target.empty()) rc.data.name = target;
  {
    json probe = {{"data", {{"name", rc.data.name}}}};
    parse_run_config(probe.dump());
  }

  Tensor samples = samples_from_csv(read_text(samples_path));
  MetricsReport mr;
  if (dataset_has_oracle(rc.data)) {
    mr = distribution_metrics(samples, dataset_oracle(rc.data), rc.eval.ref_n, rc.seed);
  } else {
    Tensor ref = swiss_roll(rc.eval.ref_n, rng::key(rc.seed, rng::kMetrics, 0, 0),
                            rc.data.roll_noise);
    mr = distribution_metrics(samples, ref);
  }

  json report;
  report["seed"] = rc.seed;
  report["target"] = rc.data.name;
  report["n_samples"] = mr.n_samples;
  report["mean_error"] = mr.mean_error;
  report["cov_error"] = mr.cov_error;
  report["energy_distance"] = mr.energy_distance;
  report["mode_mass"] = std::vector<double>(mr.mode_mass.data(),
                                            mr.mode_mass.data() + mr.mode_mass.size());
  report["unassigned_mass"] = mr.unassigned_mass;
  json cfg_echo = json::parse(resolved, nullptr, false);
  report["config"] = cfg_echo.is_discarded() ? json::object() : cfg_echo;
  write_text_atomic(g.resolve(out, "report.json"), report.dump(2) + "\n");
  return 0;
}

int cmd_plot(const std::string& samples_path, const std::string& trace_path,
             const std::string& out, const GlobalArgs& g) {
  if (samples_path.empty() && trace_path.empty())
    throw ConfigError("--samples: give either --samples or --trace");
  std::string svg;
  if (!samples_path.empty()) {
    require_file(samples_path, "--samples");
    Tensor pts = samples_from_csv(read_text(samples_path));
    svg = svg_scatter(pts, fs::path(samples_path).filename().string());
  } else {
    require_file(trace_path, "--trace");
    Tensor flat = samples_from_csv(read_text(trace_path));
    // rows: time, sample, coords...; regroup by successive time values
    if (flat.rows() < 3) throw std::runtime_error("cli: trace csv needs time,sample,coords");
    std::vector<Tensor> states;
    std::vector<double> times;
    Eigen::Index col = 0;
    while (col < flat.cols()) {
      double t = flat(0, col);
      Eigen::Index end = col;
      while (end < flat.cols() && flat(0, end) == t) ++end;
      Tensor st(flat.rows() - 2, end - col);
      for (Eigen::Index j = col; j < end; ++j) st.col(j - col) = flat.block(2, j, flat.rows() - 2, 1);
      states.push_back(st);
      times.push_back(t);
      col = end;
    }
    svg = svg_trajectories(states, times, fs::path(trace_path).filename().string());
  }
  write_text_atomic(g.resolve(out, "plot.svg"), svg);
  return 0;
}

}  // namespace

int run_command(int argc, const char* const* argv) {
  CLI::App app{"desk-scale diffusion laboratory"};
  app.require_subcommand(1);

  GlobalArgs g;
  auto* seed_opt = app.add_option("--seed", g.seed, "override the run seed");
  app.add_option("--threads", g.threads, "column-chunked sampling threads");
  app.add_option("--out-dir", g.out_dir, "directory for default artifact paths");

  std::string config_path, out, curve, model_path, teacher_path, method, reward_tag;
  std::string samples_path, target, trace_path, algorithm;
  int steps = 0, n = 0;
  double eta = -1.0, cfg_w = 0.0;
  bool trace = false;

  CLI::App* train_cmd = app.add_subcommand("train", "fit a denoiser to a toy dataset");
  train_cmd->add_option("--config", config_path, "run file")->required();
  train_cmd->add_option("--out", out, "checkpoint path");
  train_cmd->add_option("--curve", curve, "loss curve csv path");

  CLI::App* sample_cmd = app.add_subcommand("sample", "draw samples from a checkpoint");
  sample_cmd->add_option("--model", model_path, "checkpoint")->required();
  sample_cmd->add_option("--config", config_path, "run file");
  sample_cmd->add_option("--algorithm", algorithm, "sampler tag");
  sample_cmd->add_option("--steps", steps, "reverse steps");
  sample_cmd->add_option("--eta", eta, "ddim stochasticity");
  sample_cmd->add_option("--cfg-w", cfg_w, "guidance weight");
  sample_cmd->add_option("--n", n, "sample count");
  sample_cmd->add_flag("--trace", trace, "emit per-step states");
  sample_cmd->add_option("--out", out, "samples csv path");

  CLI::App* distill_cmd = app.add_subcommand("distill", "compress a teacher into a student");
  distill_cmd->add_option("--method", method, "cd|pd|guided-pd|sds|vsd|dmd|add|rf1|rf2");
  distill_cmd->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  distill_cmd->add_option("--config", config_path, "run file");
  distill_cmd->add_option("--out", out, "student checkpoint path");
  distill_cmd->add_option("--curve", curve, "diagnostics csv path");

  CLI::App* finetune_cmd = app.add_subcommand("finetune", "reward-tune a checkpoint");
  finetune_cmd->add_option("--method", method, "refl|draft|qsm|ddpo|drwr");
  finetune_cmd->add_option("--model", model_path, "checkpoint")->required();
  finetune_cmd->add_option("--reward", reward_tag, "coordinate|neg-sq-dist|gmm")->required();
  finetune_cmd->add_option("--config", config_path, "run file");
  finetune_cmd->add_option("--out", out, "tuned checkpoint path");
  finetune_cmd->add_option("--curve", curve, "per-step csv path");

  CLI::App* eval_cmd = app.add_subcommand("eval", "score samples against a target");
  eval_cmd->add_option("--samples", samples_path, "samples csv")->required();
  eval_cmd->add_option("--target", target, "two-mode|ring|swiss-roll");
  eval_cmd->add_option("--config", config_path, "run file");
  eval_cmd->add_option("--out", out, "report json path");

  CLI::App* plot_cmd = app.add_subcommand("plot", "render csv artifacts as svg");
  plot_cmd->add_option("--samples", samples_path, "samples csv for a scatter");
  plot_cmd->add_option("--trace", trace_path, "trace csv for trajectories");
  plot_cmd->add_option("--out", out, "svg path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  g.seed_set = seed_opt->count() > 0;

  try {
    if (*train_cmd) return cmd_train(config_path, out, curve, g);
    if (*sample_cmd)
      return cmd_sample(model_path, config_path, algorithm, steps, eta, cfg_w, n, trace, out,
                        g);
    if (*distill_cmd) return cmd_distill(method, teacher_path, config_path, out, curve, g);
    if (*finetune_cmd)
      return cmd_finetune(method, model_path, reward_tag, config_path, out, curve, g);
    if (*eval_cmd) return cmd_eval(samples_path, target, config_path, out, g);
    if (*plot_cmd) return cmd_plot(samples_path, trace_path, out, g);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace dlab
