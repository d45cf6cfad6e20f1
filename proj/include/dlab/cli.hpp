#pragma once

#include <string>
#include <vector>

#include "dlab/config.hpp"
#include "dlab/net.hpp"

namespace dlab {

/// Dispatches one subcommand (train, distill, finetune, sample, eval, plot).
/// Exit status: 0 on success, 2 for configuration problems (the message names
/// the offending field or flag), 1 for numerical aborts and io failures.
int run_command(int argc, const char* const* argv);

// Pieces of the command pipeline, exposed so tests can drive them directly.

/// Writes through a sibling temporary file and renames it into place.
void write_text_atomic(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

/// One sample per row, columns = coordinates; `meta` lines become leading
/// '#'-prefixed comments (config echo, seed).
std::string samples_to_csv(const Tensor& x, const std::vector<std::string>& meta);
/// Parses a samples CSV back, skipping comments and an optional header row.
Tensor samples_from_csv(const std::string& text);

/// Runs the configured sampler. Work is split into fixed-width column blocks
/// whose noise is addressed by absolute column index; the decomposition does
/// not depend on `threads`, so the result is byte-identical for any thread
/// count. `trace`, when given, receives the per-step states of
/// trajectory-producing samplers.
Tensor sample_batch(const RunConfig& cfg, const DenoiserModel& model, int threads,
                    std::vector<Tensor>* trace = nullptr,
                    std::vector<double>* trace_times = nullptr);

std::string svg_scatter(const Tensor& points, const std::string& title);
std::string svg_trajectories(const std::vector<Tensor>& states,
                             const std::vector<double>& times, const std::string& title);

}  // namespace dlab
