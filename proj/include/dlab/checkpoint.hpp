#pragma once

#include <string>

#include "dlab/net.hpp"

namespace dlab {

/// Binary weight snapshot: an eight-byte tag, a JSON architecture header and
/// a raw little-endian double payload holding both the fast and the slow
/// (EMA) weight sets. Round-trips are bit exact. The file is written to a
/// sibling temporary first and renamed into place, so readers never see a
/// half-written snapshot. `note` is an opaque string echoed back on load
/// (used for run-configuration provenance).
void save_checkpoint(const std::string& path, const DenoiserModel& model,
                     const std::string& note = "");

DenoiserModel load_checkpoint(const std::string& path);

/// The header's note field without loading the weights.
std::string checkpoint_note(const std::string& path);

}  // namespace dlab
