#pragma once

#include <cmath>
#include <cstdint>
#include <Eigen/Dense>

namespace dlab {

using Tensor = Eigen::MatrixXd;

/// Counter-based random streams. Every draw is addressed by
/// (seed, stream, step, index), so two algorithms that request the same
/// address see the same values regardless of call order. This is what makes
/// shared-noise equivalence runs (and byte-identical replays) possible.
namespace rng {

inline uint64_t mix(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t key(uint64_t seed, uint64_t stream, uint64_t step, uint64_t index) {
  uint64_t h = mix(seed);
  h = mix(h ^ (stream * 0x9e3779b97f4a7c15ull));
  h = mix(h ^ (step * 0xc2b2ae3d27d4eb4full));
  h = mix(h ^ (index * 0x165667b19e3779f9ull));
  return h;
}

/// Uniform in (0,1), never exactly 0 or 1.
inline double to_unit(uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// Sequence generator for one counter address.
class Stream {
 public:
  explicit Stream(uint64_t k) : state_(k) {}
  Stream(uint64_t seed, uint64_t stream, uint64_t step, uint64_t index)
      : state_(key(seed, stream, step, index)) {}

  uint64_t next_bits() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  double uniform() { return to_unit(next_bits()); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_bits() % span);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Stream ids. Column j of a batch always uses index = base_index + j, so a
// sample keeps its noise identity when batches are chunked.
enum : uint64_t {
  kInit = 1,       // initial states of reverse-time runs
  kStepNoise = 2,  // per-step sampler noise, step = absolute time index
  kData = 3,       // dataset draws
  kTime = 4,       // time draws in losses
  kLossNoise = 5,  // forward-diffusion noise in losses
  kParamInit = 6,  // network initialization
  kMetrics = 7,    // subsampling / permutation draws in metrics
  kMisc = 8,
};

/// Matrix of standard normals; column j is addressed by (seed, stream, step,
/// base_index + j) and is independent of every other column.
inline Tensor normal_matrix(Eigen::Index rows, Eigen::Index cols, uint64_t seed,
                            uint64_t stream, uint64_t step, uint64_t base_index = 0) {
  Tensor out(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    Stream s(seed, stream, step, base_index + static_cast<uint64_t>(j));
    for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = s.normal();
  }
  return out;
}

inline Eigen::VectorXd normal_vector(Eigen::Index n, uint64_t seed, uint64_t stream,
                                     uint64_t step, uint64_t base_index = 0) {
  return normal_matrix(n, 1, seed, stream, step, base_index).col(0);
}

/// Per-sample integer draws in [lo, hi], one stream per column.
inline Eigen::VectorXi uniform_int_vector(Eigen::Index n, int lo, int hi, uint64_t seed,
                                          uint64_t stream, uint64_t step,
                                          uint64_t base_index = 0) {
  Eigen::VectorXi out(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Stream s(seed, stream, step, base_index + static_cast<uint64_t>(j));
    out(j) = s.uniform_int(lo, hi);
  }
  return out;
}

inline Eigen::VectorXd uniform_vector(Eigen::Index n, uint64_t seed, uint64_t stream,
                                      uint64_t step, uint64_t base_index = 0) {
  Eigen::VectorXd out(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Stream s(seed, stream, step, base_index + static_cast<uint64_t>(j));
    out(j) = s.uniform();
  }
  return out;
}

}  // namespace rng
}  // namespace dlab
