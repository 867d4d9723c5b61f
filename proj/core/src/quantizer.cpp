#include "samplernn/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "samplernn/errors.hpp"

namespace samplernn {

void QuantizerConfig::validate() const {
  if (q < 2 || q % 2 != 0) throw ConfigError("model.q", "must be an even level count >= 2, got " + std::to_string(q));
}

int quantize(double x, const QuantizerConfig& cfg) {
  if (std::isnan(x)) throw NumericError("quantize: NaN amplitude");
  const double scaled = std::floor((x + 1.0) * 0.5 * cfg.q);
  return static_cast<int>(std::clamp(scaled, 0.0, static_cast<double>(cfg.q - 1)));
}

double dequantize(int bin, const QuantizerConfig& cfg) {
  if (bin < 0 || bin >= cfg.q) {
    throw IndexError("dequantize: bin " + std::to_string(bin) + " outside [0, " + std::to_string(cfg.q) + ")");
  }
  return (bin + 0.5) / cfg.q * 2.0 - 1.0;
}

double reconstruct(int bin, const QuantizerConfig& cfg) {
  return bin == cfg.silence_bin() ? 0.0 : dequantize(bin, cfg);
}

std::vector<int> quantize(std::span<const double> xs, const QuantizerConfig& cfg) {
  std::vector<int> out(xs.size());
  std::transform(xs.begin(), xs.end(), out.begin(), [&](double x) { return quantize(x, cfg); });
  return out;
}

std::vector<double> dequantize(std::span<const int> bins, const QuantizerConfig& cfg) {
  std::vector<double> out(bins.size());
  std::transform(bins.begin(), bins.end(), out.begin(), [&](int b) { return dequantize(b, cfg); });
  return out;
}

std::int16_t amplitude_to_pcm16(double x) {
  if (std::isnan(x)) throw NumericError("amplitude_to_pcm16: NaN amplitude");
  const double s = std::round(x * 32768.0);
  return static_cast<std::int16_t>(std::clamp(s, -32768.0, 32767.0));
}

namespace {

struct Moments {
  double sum = 0.0;
  std::size_t n = 0;
};

NormStats finish(double mean, double sq, std::size_t n) {
  const double var = sq / static_cast<double>(n);
  // a constant signal leaves only rounding noise in the variance
  if (!(std::sqrt(var) > 1e-9 * std::max(1.0, std::abs(mean)))) {
    throw DataError("compute_norm_stats: zero variance in train split");
  }
  return {mean, std::sqrt(var)};
}

}  // namespace

NormStats compute_norm_stats(std::span<const double> samples) {
  if (samples.empty()) throw DataError("compute_norm_stats: empty train split");
  double sum = 0.0;
  for (const double x : samples) sum += x;
  const double mean = sum / static_cast<double>(samples.size());
  double sq = 0.0;
  for (const double x : samples) sq += (x - mean) * (x - mean);
  return finish(mean, sq, samples.size());
}

NormStats compute_norm_stats(const std::vector<std::vector<double>>& sequences) {
  Moments m;
  for (const auto& s : sequences) {
    for (const double x : s) m.sum += x;
    m.n += s.size();
  }
  if (m.n == 0) throw DataError("compute_norm_stats: empty train split");
  const double mean = m.sum / static_cast<double>(m.n);
  double sq = 0.0;
  for (const auto& s : sequences) {
    for (const double x : s) sq += (x - mean) * (x - mean);
  }
  return finish(mean, sq, m.n);
}

}  // namespace samplernn
