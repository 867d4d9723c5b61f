#pragma once

#include <array>
#include <span>
#include <utility>
#include <variant>

#include "samplernn/layers.hpp"

namespace samplernn {

enum class CellKind { kGru, kLstm };

/// Effective weights of a recurrent cell for one forward pass.
template <typename T>
struct CellWeights {
  BoundLinear<T> input;  // x -> gate pre-activations, with bias
  Tensor<T> recurrent;   // [G*H x H]
};

/// GRU with gates r, z, n. The reset gate multiplies the hidden-to-hidden
/// term of the candidate; h = (1 - z) * h_prev + z * n.
template <typename T>
class GruCell {
 public:
  static constexpr std::size_t kGates = 3;

  GruCell() = default;
  GruCell(std::size_t input_dim, std::size_t hidden, Rng& rng);

  std::size_t input_dim() const { return input_.in_dim(); }
  std::size_t hidden() const { return hidden_.in_dim(); }

  WeightNormLinear<T>& input_map() { return input_; }
  WeightNormLinear<T>& hidden_map() { return hidden_; }
  const WeightNormLinear<T>& input_map() const { return input_; }
  const WeightNormLinear<T>& hidden_map() const { return hidden_; }

  CellWeights<T> bind() const { return {input_.bind(), hidden_.weight()}; }
  void collect(ParameterList<T>& out, const std::string& prefix) const;

 private:
  WeightNormLinear<T> input_;   // D -> 3H, bias
  WeightNormLinear<T> hidden_;  // H -> 3H, block-orthogonal direction
};

/// LSTM with gates i, f, g, o; the forget-gate bias starts at 3.
template <typename T>
class LstmCell {
 public:
  static constexpr std::size_t kGates = 4;
  static constexpr double kForgetBias = 3.0;

  LstmCell() = default;
  LstmCell(std::size_t input_dim, std::size_t hidden, Rng& rng);

  std::size_t input_dim() const { return input_.in_dim(); }
  std::size_t hidden() const { return hidden_.in_dim(); }

  WeightNormLinear<T>& input_map() { return input_; }
  WeightNormLinear<T>& hidden_map() { return hidden_; }
  const WeightNormLinear<T>& input_map() const { return input_; }
  const WeightNormLinear<T>& hidden_map() const { return hidden_; }

  CellWeights<T> bind() const { return {input_.bind(), hidden_.weight()}; }
  void collect(ParameterList<T>& out, const std::string& prefix) const;

 private:
  WeightNormLinear<T> input_;
  WeightNormLinear<T> hidden_;
};

template <typename T>
Tensor<T> gru_step(const CellWeights<T>& cell, const Tensor<T>& h_prev, const Tensor<T>& x);
template <typename T>
Tensor<T> gru_step(const GruCell<T>& cell, const Tensor<T>& h_prev, const Tensor<T>& x) {
  return gru_step(cell.bind(), h_prev, x);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> lstm_step(const CellWeights<T>& cell, const Tensor<T>& h_prev, const Tensor<T>& c_prev,
                                          const Tensor<T>& x);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> lstm_step(const LstmCell<T>& cell, const Tensor<T>& h_prev, const Tensor<T>& c_prev,
                                          const Tensor<T>& x) {
  return lstm_step(cell.bind(), h_prev, c_prev, x);
}

/// One recurrent layer of a tier: a GRU or LSTM cell plus its learnable
/// initial state.
template <typename T>
class RecurrentLayer {
 public:
  RecurrentLayer() = default;
  RecurrentLayer(CellKind kind, std::size_t input_dim, std::size_t hidden, Rng& rng);

  CellKind kind() const { return kind_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t input_dim() const;

  GruCell<T>& gru() { return std::get<GruCell<T>>(cell_); }
  LstmCell<T>& lstm() { return std::get<LstmCell<T>>(cell_); }
  const GruCell<T>& gru() const { return std::get<GruCell<T>>(cell_); }
  const LstmCell<T>& lstm() const { return std::get<LstmCell<T>>(cell_); }

  Tensor<T>& initial_hidden() { return h0_; }
  Tensor<T>& initial_cell() { return c0_; }
  const Tensor<T>& initial_hidden() const { return h0_; }
  const Tensor<T>& initial_cell() const { return c0_; }

  CellWeights<T> bind() const;
  void collect(ParameterList<T>& out, const std::string& prefix) const;

 private:
  CellKind kind_ = CellKind::kGru;
  std::size_t hidden_ = 0;
  std::variant<GruCell<T>, LstmCell<T>> cell_;
  Tensor<T> h0_, c0_;  // [H]; c0_ only for LSTM
};

template <typename T>
struct SequenceRun {
  Tensor<T> outputs;  // [B*S x H], row b*S + s
  Tensor<T> last_hidden;
  Tensor<T> last_cell;  // LSTM only
};

/// Runs a layer over `steps` time steps of a [B*S x D] input whose row b*S + s
/// is batch row b at step s. The input projection is computed once for all
/// steps.
template <typename T>
SequenceRun<T> run_sequence(CellKind kind, const CellWeights<T>& cell, const Tensor<T>& inputs, std::size_t steps,
                            const Tensor<T>& h0, const Tensor<T>& c0);

/// Three weight-normalised layers, ReLU after the first two; the last layer
/// emits unnormalised outputs.
template <typename T>
class Mlp {
 public:
  struct Bound {
    std::array<BoundLinear<T>, 3> layers;
    Tensor<T> operator()(const Tensor<T>& x) const;
  };

  Mlp() = default;
  /// With `zero_output` the final layer starts with a zero scale and bias, so
  /// a fresh model predicts the uniform distribution.
  Mlp(std::size_t in_dim, std::size_t hidden, std::size_t out_dim, bool zero_output, Rng& rng);

  std::size_t in_dim() const { return layers_[0].in_dim(); }
  std::size_t out_dim() const { return layers_[2].out_dim(); }
  std::array<WeightNormLinear<T>, 3>& layers() { return layers_; }
  const std::array<WeightNormLinear<T>, 3>& layers() const { return layers_; }

  Bound bind() const { return {{layers_[0].bind(), layers_[1].bind(), layers_[2].bind()}}; }
  Tensor<T> forward(const Tensor<T>& x) const { return bind()(x); }
  void collect(ParameterList<T>& out, const std::string& prefix) const;

 private:
  std::array<WeightNormLinear<T>, 3> layers_;
};

template <typename T>
Tensor<T> mlp_forward(const Mlp<T>& mlp, const Tensor<T>& x) {
  return mlp.forward(x);
}

/// q x E lookup table, standard-normal init, not weight-normalised.
template <typename T>
class Embedding {
 public:
  Embedding() = default;
  Embedding(std::size_t levels, std::size_t width, Rng& rng);

  std::size_t levels() const { return table_.dim(0); }
  std::size_t width() const { return table_.dim(1); }
  Tensor<T>& table() { return table_; }
  const Tensor<T>& table() const { return table_; }

  /// [n x E] rows for the given bins.
  Tensor<T> lookup(std::span<const int> bins) const { return ops::gather_rows(table_, bins); }
  void collect(ParameterList<T>& out, const std::string& prefix) const { out.push_back({prefix + ".table", table_}); }

 private:
  Tensor<T> table_;
};

template <typename T>
Tensor<T> embed(const Embedding<T>& table, int bin);

/// Interprets a [N x 3C] output block as a Gaussian mixture: C mixture
/// logits, C means, C log standard deviations.
struct GmmHead {
  std::size_t components = 4;

  std::size_t out_dim() const { return 3 * components; }

  template <typename T>
  Tensor<T> nll(const Tensor<T>& params, std::span<const T> targets, std::span<const T> weights = {},
                std::vector<double>* per_row = nullptr) const {
    return ops::gmm_nll(params, targets, weights, per_row);
  }

  /// Draws one value from the mixture described by `row`.
  template <typename T>
  double sample(std::span<const T> row, Rng& rng) const;
};

template <typename T>
Tensor<T> gmm_nll(const GmmHead& head, const Tensor<T>& params, std::span<const T> targets) {
  return head.nll(params, targets);
}

/// Interprets a [N x F*q] output block as F independent q-way distributions,
/// one per sample of the frame.
struct MultiSoftmaxHead {
  std::size_t frame = 2;
  std::size_t levels = 256;

  std::size_t out_dim() const { return frame * levels; }

  /// [N*F x q] view, row n*F + f is sample f of frame n.
  template <typename T>
  Tensor<T> per_sample_logits(const Tensor<T>& out) const {
    return ops::reshape(out, {out.size() / levels, levels});
  }
};

/// Draws a bin from softmax(logits / temperature).
template <typename T>
int sample_categorical(std::span<const T> logits, double temperature, Rng& rng);

}  // namespace samplernn
