#pragma once

#include "samplernn/model.hpp"

namespace samplernn {

/// Flat sample-level RNN: each step embeds one sample, runs the recurrent
/// stack and predicts the next sample from the top hidden state.
template <typename T>
class BaselineRnn final : public SequenceModel<T> {
 public:
  BaselineRnn(const ModelConfig& cfg, Rng& rng);

  std::size_t history() const override { return 1; }
  std::size_t length_multiple() const override { return 1; }
  ParameterList<T> parameters() const override;
  ModelState<T> initial_state(std::size_t rows) const override;
  Tensor<T> forward(const Batch<T>& batch, ModelState<T>& state) const override;
  GenerationResult generate(const GenerateOptions& options) const override;

  Embedding<T>& embedding() { return embedding_; }
  std::vector<RecurrentLayer<T>>& layers() { return layers_; }
  Mlp<T>& mlp() { return mlp_; }

 private:
  Embedding<T> embedding_;
  std::vector<RecurrentLayer<T>> layers_;
  Mlp<T> mlp_;
};

}  // namespace samplernn
