#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace samplernn {

/// Linear q-level quantisation of amplitudes in [-1, 1].
struct QuantizerConfig {
  int q = 256;

  int silence_bin() const { return q / 2; }
  /// Raises ConfigError unless q >= 2 and even.
  void validate() const;
};

/// Clamped to [0, q); NaN raises NumericError.
int quantize(double x, const QuantizerConfig& cfg = {});
/// Bin centre; out-of-range bins raise IndexError.
double dequantize(int bin, const QuantizerConfig& cfg = {});

/// Output amplitude of a generated bin: the silence bin maps to exactly 0,
/// every other bin to its centre.
double reconstruct(int bin, const QuantizerConfig& cfg = {});

std::vector<int> quantize(std::span<const double> xs, const QuantizerConfig& cfg = {});
std::vector<double> dequantize(std::span<const int> bins, const QuantizerConfig& cfg = {});

inline double pcm16_to_amplitude(std::int16_t s) { return static_cast<double>(s) / 32768.0; }
/// Rounds half away from zero and saturates.
std::int16_t amplitude_to_pcm16(double x);

struct NormStats {
  double mean = 0.0;
  double std = 1.0;
};

/// Mean and population standard deviation of the train split. Raises
/// DataError on an empty or constant split.
NormStats compute_norm_stats(std::span<const double> samples);
NormStats compute_norm_stats(const std::vector<std::vector<double>>& sequences);

inline double standardize(double x, const NormStats& s) { return (x - s.mean) / s.std; }
inline double destandardize(double z, const NormStats& s) { return z * s.std + s.mean; }

}  // namespace samplernn
