#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "samplernn/audio.hpp"
#include "samplernn/model.hpp"
#include "samplernn/rng.hpp"
#include "samplernn/tensor.hpp"
#include "samplernn/trainer.hpp"

namespace samplernn::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "srnn") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / (tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  out << text;
}

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0, bool grad = false) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(scale * rng.normal());
  Tensor<T> t(shape, std::move(v));
  if (grad) t.set_requires_grad(true);
  return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Central difference of `f` with respect to element i of `t`.
template <typename T>
double numeric_partial(Tensor<T>& t, std::size_t i, const std::function<double()>& f, double h = 1e-5) {
  auto v = t.mutable_values();
  const T saved = v[i];
  v[i] = saved + static_cast<T>(h);
  const double up = f();
  v[i] = saved - static_cast<T>(h);
  const double down = f();
  v[i] = saved;
  return (up - down) / (2 * h);
}

/// Largest |analytic - numeric| / max(|a|, |n|, 1e-3) over every element of
/// every tensor; `loss` must build a fresh graph on each call.
inline double fd_max_rel_error(std::vector<Tensor<double>*> tensors,
                               const std::function<Tensor<double>()>& loss) {
  for (auto* t : tensors) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  {
    Tape<double> tape;
    typename Tape<double>::Scope scope(tape);
    const Tensor<double> l = loss();
    tape.backward(l);
  }
  double worst = 0.0;
  auto value = [&] {
    NoGradScope<double> ng;
    return loss().item();
  };
  for (auto* t : tensors) {
    const std::vector<double> analytic(t->grad().begin(), t->grad().end());
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double n = numeric_partial(*t, i, value);
      const double a = analytic[i];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-3}));
    }
  }
  return worst;
}

inline ModelConfig tiny_config(std::vector<std::size_t> frames = {2, 2}, std::size_t hidden = 8,
                               Variant variant = Variant::kDefault) {
  ModelConfig cfg;
  cfg.frame_sizes = std::move(frames);
  cfg.hidden = hidden;
  cfg.embed_dim = 4;
  cfg.variant = variant;
  return cfg;
}

/// Applies a small random perturbation to every parameter so zero-initialised
/// output layers do not hide structure.
template <typename T>
void jitter(SequenceModel<T>& model, std::uint64_t seed, double scale = 0.1) {
  Rng rng(seed);
  for (auto& p : model.parameters()) {
    for (auto& x : p.tensor.mutable_values()) x += static_cast<T>(scale * rng.normal());
  }
}

inline Corpus markov_corpus(const MarkovChain& chain, std::size_t sequences, std::size_t length, std::uint64_t seed) {
  std::vector<AudioSequence> items;
  for (std::size_t i = 0; i < sequences; ++i) items.push_back(synth_markov(chain, length, Rng::mix(seed, i)));
  return split_corpus(std::move(items), {0.8, 0.1, 0.1});
}

/// Random amplitudes in (-1, 1).
inline std::vector<double> noise(std::size_t n, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = std::clamp(scale * rng.normal(), -0.999, 0.999);
  return v;
}

/// Teacher-forcing batch of one row covering samples [offset, offset + L).
template <typename T>
Batch<T> row_batch(const SequenceModel<T>& model, const EncodedSequence& seq, std::size_t offset, std::size_t L) {
  Batch<T> b = make_batch<T>(1, L, model.history());
  fill_batch_row(b, 0, seq, offset, model.config().quantizer().silence_bin(), static_cast<T>(model.silence_input()));
  return b;
}

}  // namespace samplernn::testing
