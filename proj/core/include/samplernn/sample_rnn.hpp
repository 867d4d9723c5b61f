#pragma once

#include <optional>

#include "samplernn/model.hpp"

namespace samplernn {

/// Frame-level tier k >= 2: optional input map W_x (absent on the top tier),
/// a stack of recurrent layers and r(k) upsampling projections.
template <typename T>
struct FrameTier {
  std::size_t index = 0;  // k
  std::size_t frame = 0;  // FS(k)
  std::size_t ratio = 0;  // r(k)
  bool top = false;
  WeightNormLinear<T> input_map;
  std::vector<RecurrentLayer<T>> layers;
  std::vector<WeightNormLinear<T>> upsample;

  struct Bound {
    std::optional<BoundLinear<T>> input;
    std::vector<CellWeights<T>> cells;
    std::vector<BoundLinear<T>> upsample;
  };
  Bound bind() const;
};

/// Hidden (and cell) state of every layer in one tier, [rows x H] each.
template <typename T>
struct TierLayerState {
  std::vector<Tensor<T>> h, c;
};

template <typename T>
struct TierActivation {
  Tensor<T> input;                 // combined tier input
  Tensor<T> hidden;                // top layer output after the step
  std::vector<Tensor<T>> conditioning;  // r(k) vectors in temporal order
};

template <typename T>
class SampleRnn final : public SequenceModel<T> {
 public:
  SampleRnn(const ModelConfig& cfg, Rng& rng);

  std::size_t history() const override { return this->cfg_.frame_sizes.back(); }
  std::size_t length_multiple() const override { return this->cfg_.frame_sizes.back(); }
  ParameterList<T> parameters() const override;
  ModelState<T> initial_state(std::size_t rows) const override;
  Tensor<T> forward(const Batch<T>& batch, ModelState<T>& state) const override;
  GenerationResult generate(const GenerateOptions& options) const override;

  /// Tier k in 2..K.
  FrameTier<T>& tier(std::size_t k) { return tiers_.at(k - 2); }
  const FrameTier<T>& tier(std::size_t k) const { return tiers_.at(k - 2); }
  Embedding<T>& embedding() { return embedding_; }
  WeightNormLinear<T>& sample_input_map() { return sample_input_; }
  Mlp<T>& mlp() { return mlp_; }
  const Embedding<T>& embedding() const { return embedding_; }
  const WeightNormLinear<T>& sample_input_map() const { return sample_input_; }
  const Mlp<T>& mlp() const { return mlp_; }

  /// Learnable initial state of tier k, broadcast to `rows`.
  TierLayerState<T> initial_tier_state(std::size_t k, std::size_t rows) const;

  /// One step of tier k on a [rows x FS(k)] frame; `c_above` is required
  /// exactly when k < K. Advances `state`.
  TierActivation<T> frame_tier_step(std::size_t k, TierLayerState<T>& state, const Tensor<T>& frame,
                                    const Tensor<T>* c_above) const;

  /// The r(k) conditioning vectors W_j h + b_j, j = 1..r(k).
  std::vector<Tensor<T>> upsample(std::size_t k, const Tensor<T>& h) const;

  /// Sample-level outputs for `rows` windows. `bins` and `reals` hold
  /// rows*FS(1) values (the embedding variants read bins, the others reals);
  /// `c` is [rows x H]. Multisoftmax ignores the window and returns
  /// [rows x FS(1)*q].
  Tensor<T> sample_level_forward(std::span<const int> bins, std::span<const T> reals, const Tensor<T>& c) const;

 private:
  struct BoundSample {
    std::optional<BoundLinear<T>> input;
    typename Mlp<T>::Bound mlp;
  };
  BoundSample bind_sample() const;
  Tensor<T> sample_level(const BoundSample& bound, std::span<const int> bins, std::span<const T> reals,
                         const Tensor<T>& c) const;
  TierActivation<T> tier_step(const FrameTier<T>& tier, const typename FrameTier<T>::Bound& bound,
                              TierLayerState<T>& state, const Tensor<T>& frame, const Tensor<T>* c_above) const;
  bool embedded() const { return this->cfg_.variant == Variant::kDefault; }

  std::vector<FrameTier<T>> tiers_;  // tiers 2..K
  Embedding<T> embedding_;
  WeightNormLinear<T> sample_input_;
  Mlp<T> mlp_;
};

}  // namespace samplernn
