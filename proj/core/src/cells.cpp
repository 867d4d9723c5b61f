#include "samplernn/cells.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "samplernn/errors.hpp"

namespace samplernn {

namespace {

template <typename T>
Tensor<T> block_orthogonal(std::size_t blocks, std::size_t hidden, Rng& rng) {
  Tensor<T> out(Shape{blocks * hidden, hidden});
  auto dst = out.mutable_values();
  for (std::size_t b = 0; b < blocks; ++b) {
    const Tensor<T> block = init_tensor<T>(InitSpec::orthogonal(), {hidden, hidden}, rng);
    std::copy(block.values().begin(), block.values().end(), dst.begin() + static_cast<std::ptrdiff_t>(b * hidden * hidden));
  }
  return out;
}

template <typename T>
Tensor<T> as_rows(const Tensor<T>& x) {
  return x.rank() == 1 ? ops::reshape(x, {1, x.size()}) : x;
}

template <typename T>
void check_step_shapes(const CellWeights<T>& cell, std::size_t gates, const Tensor<T>& h, const Tensor<T>& x) {
  const std::size_t hidden = cell.recurrent.dim(1);
  const std::size_t in = cell.input.weight.dim(1);
  const std::size_t h_cols = h.rank() == 1 ? h.size() : h.dim(1);
  const std::size_t x_cols = x.rank() == 1 ? x.size() : x.dim(1);
  if (cell.recurrent.dim(0) != gates * hidden || h_cols != hidden || x_cols != in) {
    throw DimensionError("cell step: expected h width " + std::to_string(hidden) + " and x width " +
                         std::to_string(in) + ", got h " + shape_string(h.shape()) + " and x " +
                         shape_string(x.shape()));
  }
}

template <typename T>
Tensor<T> restore_rank(const Tensor<T>& out, const Tensor<T>& like) {
  return like.rank() == 1 ? ops::reshape(out, {out.size()}) : out;
}

}  // namespace

template <typename T>
GruCell<T>::GruCell(std::size_t input_dim, std::size_t hidden, Rng& rng)
    : input_(input_dim, kGates * hidden, true, InitSpec::he_fan_in(), rng),
      hidden_(block_orthogonal<T>(kGates, hidden, rng), false) {}

template <typename T>
void GruCell<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  input_.collect(out, prefix + ".wx");
  hidden_.collect(out, prefix + ".wh");
}

template <typename T>
LstmCell<T>::LstmCell(std::size_t input_dim, std::size_t hidden, Rng& rng)
    : input_(input_dim, kGates * hidden, true, InitSpec::he_fan_in(), rng),
      hidden_(block_orthogonal<T>(kGates, hidden, rng), false) {
  auto b = input_.bias().mutable_values();
  std::fill(b.begin() + static_cast<std::ptrdiff_t>(hidden), b.begin() + static_cast<std::ptrdiff_t>(2 * hidden),
            static_cast<T>(kForgetBias));
}

template <typename T>
void LstmCell<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  input_.collect(out, prefix + ".wx");
  hidden_.collect(out, prefix + ".wh");
}

template <typename T>
Tensor<T> gru_step(const CellWeights<T>& cell, const Tensor<T>& h_prev, const Tensor<T>& x) {
  check_step_shapes(cell, GruCell<T>::kGates, h_prev, x);
  const Tensor<T> gx = cell.input(as_rows(x));
  return restore_rank(ops::gru_cell(gx, as_rows(h_prev), cell.recurrent), h_prev);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> lstm_step(const CellWeights<T>& cell, const Tensor<T>& h_prev, const Tensor<T>& c_prev,
                                          const Tensor<T>& x) {
  check_step_shapes(cell, LstmCell<T>::kGates, h_prev, x);
  if (c_prev.shape() != h_prev.shape()) {
    throw DimensionError("lstm_step: c " + shape_string(c_prev.shape()) + " vs h " + shape_string(h_prev.shape()));
  }
  const std::size_t hidden = cell.recurrent.dim(1);
  const Tensor<T> gx = cell.input(as_rows(x));
  const Tensor<T> hc = ops::lstm_cell(gx, as_rows(h_prev), as_rows(c_prev), cell.recurrent);
  return {restore_rank(ops::slice_cols(hc, 0, hidden), h_prev), restore_rank(ops::slice_cols(hc, hidden, hidden), c_prev)};
}

template <typename T>
RecurrentLayer<T>::RecurrentLayer(CellKind kind, std::size_t input_dim, std::size_t hidden, Rng& rng)
    : kind_(kind), hidden_(hidden) {
  if (kind == CellKind::kGru) {
    cell_ = GruCell<T>(input_dim, hidden, rng);
  } else {
    cell_ = LstmCell<T>(input_dim, hidden, rng);
    c0_ = Tensor<T>(Shape{hidden});
    c0_.set_requires_grad(true);
  }
  h0_ = Tensor<T>(Shape{hidden});
  h0_.set_requires_grad(true);
}

template <typename T>
std::size_t RecurrentLayer<T>::input_dim() const {
  return kind_ == CellKind::kGru ? gru().input_dim() : lstm().input_dim();
}

template <typename T>
CellWeights<T> RecurrentLayer<T>::bind() const {
  return kind_ == CellKind::kGru ? gru().bind() : lstm().bind();
}

template <typename T>
void RecurrentLayer<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  if (kind_ == CellKind::kGru) {
    gru().collect(out, prefix + ".gru");
  } else {
    lstm().collect(out, prefix + ".lstm");
  }
  out.push_back({prefix + ".h0", h0_});
  if (c0_.defined()) out.push_back({prefix + ".c0", c0_});
}

template <typename T>
SequenceRun<T> run_sequence(CellKind kind, const CellWeights<T>& cell, const Tensor<T>& inputs, std::size_t steps,
                            const Tensor<T>& h0, const Tensor<T>& c0) {
  if (steps == 0 || inputs.rank() != 2 || inputs.dim(0) % steps != 0) {
    throw DimensionError("run_sequence: input " + shape_string(inputs.shape()) + " does not split into " +
                         std::to_string(steps) + " steps");
  }
  const std::size_t hidden = cell.recurrent.dim(1);
  const Tensor<T> gx_all = cell.input(inputs);
  std::vector<Tensor<T>> outputs;
  outputs.reserve(steps);
  Tensor<T> h = h0, c = c0;
  for (std::size_t s = 0; s < steps; ++s) {
    const Tensor<T> gx = ops::time_step(gx_all, steps, s);
    if (kind == CellKind::kGru) {
      h = ops::gru_cell(gx, h, cell.recurrent);
    } else {
      const Tensor<T> hc = ops::lstm_cell(gx, h, c, cell.recurrent);
      h = ops::slice_cols(hc, 0, hidden);
      c = ops::slice_cols(hc, hidden, hidden);
    }
    outputs.push_back(h);
  }
  return {ops::stack_time(outputs), h, c};
}

template <typename T>
Tensor<T> Mlp<T>::Bound::operator()(const Tensor<T>& x) const {
  return layers[2](ops::relu(layers[1](ops::relu(layers[0](x)))));
}

template <typename T>
Mlp<T>::Mlp(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, bool zero_output, Rng& rng)
    : layers_{WeightNormLinear<T>(in_dim, hidden, true, InitSpec::he_fan_in(), rng),
              WeightNormLinear<T>(hidden, hidden, true, InitSpec::he_fan_in(), rng),
              WeightNormLinear<T>(hidden, out_dim, true, InitSpec::he_fan_in(), rng)} {
  if (zero_output) {
    auto g = layers_[2].scale().mutable_values();
    std::fill(g.begin(), g.end(), T{0});
  }
}

template <typename T>
void Mlp<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + ".l" + std::to_string(i + 1));
}

template <typename T>
Embedding<T>::Embedding(std::size_t levels, std::size_t width, Rng& rng)
    : table_(init_tensor<T>(InitSpec::standard_normal(), {levels, width}, rng)) {
  table_.set_requires_grad(true);
}

template <typename T>
Tensor<T> embed(const Embedding<T>& table, int bin) {
  const int bins[1] = {bin};
  return ops::reshape(table.lookup(bins), {table.width()});
}

template <typename T>
double GmmHead::sample(std::span<const T> row, Rng& rng) const {
  const std::size_t c = components;
  if (row.size() != 3 * c) {
    throw DimensionError("GmmHead::sample: row has " + std::to_string(row.size()) + " values, expected " +
                         std::to_string(3 * c));
  }
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < c; ++i) top = std::max(top, static_cast<double>(row[i]));
  std::vector<double> w(c);
  double total = 0.0;
  for (std::size_t i = 0; i < c; ++i) total += w[i] = std::exp(static_cast<double>(row[i]) - top);
  if (!std::isfinite(total)) throw NumericError("GmmHead::sample: non-finite mixture logits");
  double u = rng.uniform() * total;
  std::size_t pick = c - 1;
  for (std::size_t i = 0; i < c; ++i) {
    if (u < w[i]) {
      pick = i;
      break;
    }
    u -= w[i];
  }
  const double mean = row[c + pick];
  const double log_sigma = std::clamp(static_cast<double>(row[2 * c + pick]), ops::kGmmLogSigmaMin, ops::kGmmLogSigmaMax);
  return mean + std::exp(log_sigma) * rng.normal();
}

template <typename T>
int sample_categorical(std::span<const T> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw DimensionError("sample_categorical: empty logits");
  if (!(temperature > 0.0)) throw ContractError("sample_categorical: temperature must be positive");
  double top = -std::numeric_limits<double>::infinity();
  for (const T v : logits) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError("sample_categorical: non-finite logit among " + std::to_string(logits.size()));
    }
    top = std::max(top, static_cast<double>(v));
  }
  thread_local std::vector<double> weights;
  weights.resize(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    total += weights[i] = std::exp((static_cast<double>(logits[i]) - top) / temperature);
  }
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (u < weights[i]) return static_cast<int>(i);
    u -= weights[i];
  }
  for (std::size_t i = logits.size(); i-- > 0;) {
    if (weights[i] > 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(logits.size() - 1);
}

#define SAMPLERNN_INSTANTIATE_CELLS(T)                                                                              \
  template class GruCell<T>;                                                                                      \
  template class LstmCell<T>;                                                                                     \
  template class RecurrentLayer<T>;                                                                               \
  template class Mlp<T>;                                                                                          \
  template class Embedding<T>;                                                                                    \
  template Tensor<T> gru_step<T>(const CellWeights<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template std::pair<Tensor<T>, Tensor<T>> lstm_step<T>(const CellWeights<T>&, const Tensor<T>&, const Tensor<T>&, \
                                                        const Tensor<T>&);                                        \
  template SequenceRun<T> run_sequence<T>(CellKind, const CellWeights<T>&, const Tensor<T>&, std::size_t,         \
                                          const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> embed<T>(const Embedding<T>&, int);                                                          \
  template double GmmHead::sample<T>(std::span<const T>, Rng&) const;                                             \
  template int sample_categorical<T>(std::span<const T>, double, Rng&);

SAMPLERNN_INSTANTIATE_CELLS(float)
SAMPLERNN_INSTANTIATE_CELLS(double)

}  // namespace samplernn
