#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace gslf {

/// FNV-1a 64-bit hash. Used for stream derivation, config hashes and
/// parameter fingerprints.
std::uint64_t fnv1a64(const void* data, std::size_t len,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Deterministic 64-bit PRNG with named substreams.
///
/// Engine: std::mt19937_64 (fully specified by the standard). Substreams are
/// derived from a master seed, a purpose tag and an index via FNV-1a + a
/// splitmix64 finalizer, so consumers (data generation, weight init, dropout,
/// batch sampling) never perturb each other's sequences.
///
/// Distributions are implemented here rather than with <random> adaptors so
/// the sampled sequences are reproducible across standard libraries:
///  - uniform():       top 53 bits of the next word mapped onto [0, 1)
///  - gaussian():      Box-Muller transform over uniform()
///  - uniform_index(): multiply-high range reduction (Lemire)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  static Rng stream(std::uint64_t master_seed, std::string_view purpose,
                    std::uint64_t index = 0);

  std::uint64_t next_u64() { return engine_(); }

  double uniform();
  double gaussian();
  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  /// Uniform draw from [0, bound); bound must be nonzero.
  std::size_t uniform_index(std::size_t bound);

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace gslf
