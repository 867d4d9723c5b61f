#include "samplernn/baseline_rnn.hpp"

#include "samplernn/errors.hpp"

namespace samplernn {

template <typename T>
BaselineRnn<T>::BaselineRnn(const ModelConfig& cfg, Rng& rng) : SequenceModel<T>(cfg) {
  cfg.validate();
  if (cfg.arch != Architecture::kBaseline) throw ConfigError("model.arch", "BaselineRnn needs arch = baseline");
  embedding_ = Embedding<T>(static_cast<std::size_t>(cfg.q), cfg.embed_dim, rng);
  for (std::size_t l = 0; l < cfg.layers_of(2); ++l) {
    layers_.emplace_back(cfg.cell, l == 0 ? cfg.embed_dim : cfg.hidden, cfg.hidden, rng);
  }
  mlp_ = Mlp<T>(cfg.hidden, cfg.mlp_width(), static_cast<std::size_t>(cfg.q), cfg.zero_output, rng);
}

template <typename T>
ParameterList<T> BaselineRnn<T>::parameters() const {
  ParameterList<T> out;
  embedding_.collect(out, "embedding");
  for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(out, "rnn" + std::to_string(l));
  mlp_.collect(out, "mlp");
  return out;
}

template <typename T>
ModelState<T> BaselineRnn<T>::initial_state(std::size_t rows) const {
  ModelState<T> st;
  st.rows = rows;
  st.fresh.assign(rows, true);
  for (const auto& layer : layers_) {
    typename ModelState<T>::Layer slot;
    slot.h.assign(rows * this->cfg_.hidden, T{0});
    if (layer.kind() == CellKind::kLstm) slot.c.assign(rows * this->cfg_.hidden, T{0});
    st.layers.push_back(std::move(slot));
  }
  return st;
}

template <typename T>
Tensor<T> BaselineRnn<T>::forward(const Batch<T>& batch, ModelState<T>& state) const {
  this->check_batch(batch, state);
  if (state.layers.size() != layers_.size()) throw ContractError("state does not match the model");
  const std::size_t rows = batch.rows, len = batch.length, width = batch.width();
  std::vector<int> prev(rows * len);
  for (std::size_t b = 0; b < rows; ++b) {
    std::copy_n(batch.bins.data() + b * width, len, prev.data() + b * len);
  }
  Tensor<T> x = embedding_.lookup(prev);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& slot = state.layers[l];
    const RecurrentLayer<T>& layer = layers_[l];
    const Tensor<T> h0 = ops::blend_rows(layer.initial_hidden(), std::span<const T>(slot.h), state.fresh);
    Tensor<T> c0;
    if (layer.kind() == CellKind::kLstm) c0 = ops::blend_rows(layer.initial_cell(), std::span<const T>(slot.c), state.fresh);
    SequenceRun<T> run = run_sequence(layer.kind(), layer.bind(), x, len, h0, c0);
    x = run.outputs;
    auto hv = run.last_hidden.values();
    slot.h.assign(hv.begin(), hv.end());
    if (layer.kind() == CellKind::kLstm) {
      auto cv = run.last_cell.values();
      slot.c.assign(cv.begin(), cv.end());
    }
  }
  std::fill(state.fresh.begin(), state.fresh.end(), false);
  return mlp_.forward(x);
}

template <typename T>
GenerationResult BaselineRnn<T>::generate(const GenerateOptions& options) const {
  NoGradScope<T> no_grad;
  if (options.samples == 0) throw ContractError("generate: need at least one sample");
  Rng rng(options.seed);
  const std::size_t hidden = this->cfg_.hidden;
  std::vector<CellWeights<T>> cells;
  std::vector<Tensor<T>> h, c;
  const std::vector<T> zeros(hidden, T{0});
  const std::vector<bool> fresh{true};
  for (const auto& layer : layers_) {
    cells.push_back(layer.bind());
    h.push_back(ops::blend_rows(layer.initial_hidden(), std::span<const T>(zeros), fresh));
    c.push_back(layer.kind() == CellKind::kLstm ? ops::blend_rows(layer.initial_cell(), std::span<const T>(zeros), fresh)
                                                : Tensor<T>());
  }
  const auto mlp = mlp_.bind();
  GenerationResult result;
  result.output_width = this->output_width();
  int last = this->cfg_.quantizer().silence_bin();
  for (std::size_t i = 0; i < options.samples; ++i) {
    const int prev[1] = {last};
    Tensor<T> x = embedding_.lookup(prev);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Tensor<T> gx = cells[l].input(x);
      if (layers_[l].kind() == CellKind::kGru) {
        h[l] = ops::gru_cell(gx, h[l], cells[l].recurrent);
      } else {
        const Tensor<T> hc = ops::lstm_cell(gx, h[l], c[l], cells[l].recurrent);
        h[l] = ops::slice_cols(hc, 0, hidden);
        c[l] = ops::slice_cols(hc, hidden, hidden);
      }
      x = h[l];
    }
    const Tensor<T> logits = mlp(x);
    const bool silent = options.silence && i >= options.silence->start && i - options.silence->start < options.silence->length;
    const auto e = this->emit(logits.values(), silent, options.temperature, rng);
    last = e.bin;
    result.bins.push_back(e.bin);
    result.amplitudes.push_back(e.amplitude);
    if (options.record_outputs) result.outputs.insert(result.outputs.end(), logits.values().begin(), logits.values().end());
  }
  return result;
}

template class BaselineRnn<float>;
template class BaselineRnn<double>;

}  // namespace samplernn
