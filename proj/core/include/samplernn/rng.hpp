#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace samplernn {

/// Seeded generator with a serialisable state. Distributions are computed
/// locally from raw engine output so no hidden caches exist between draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal();

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  std::string state() const;
  void set_state(const std::string& text);

  /// Derives an independent stream for the given index.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t index);

 private:
  std::mt19937_64 engine_;
};

}  // namespace samplernn
