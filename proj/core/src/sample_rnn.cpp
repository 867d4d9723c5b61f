#include "samplernn/sample_rnn.hpp"

#include "samplernn/errors.hpp"

namespace samplernn {

template <typename T>
typename FrameTier<T>::Bound FrameTier<T>::bind() const {
  Bound out;
  if (!top) out.input = input_map.bind();
  for (const auto& layer : layers) out.cells.push_back(layer.bind());
  for (const auto& up : upsample) out.upsample.push_back(up.bind());
  return out;
}

template <typename T>
SampleRnn<T>::SampleRnn(const ModelConfig& cfg, Rng& rng) : SequenceModel<T>(cfg) {
  cfg.validate();
  if (cfg.arch != Architecture::kSampleRnn) throw ConfigError("model.arch", "SampleRnn needs arch = samplernn");
  const std::size_t k_top = cfg.tiers();
  const std::size_t hidden = cfg.hidden;
  for (std::size_t k = 2; k <= k_top; ++k) {
    FrameTier<T> tier;
    tier.index = k;
    tier.frame = cfg.frame_size(k);
    tier.ratio = cfg.ratio(k);
    tier.top = k == k_top;
    if (!tier.top) tier.input_map = WeightNormLinear<T>(tier.frame, hidden, true, InitSpec::he_fan_in(), rng);
    for (std::size_t l = 0; l < cfg.layers_of(k); ++l) {
      const std::size_t in = l > 0 ? hidden : (tier.top ? tier.frame : hidden);
      tier.layers.emplace_back(cfg.cell, in, hidden, rng);
    }
    for (std::size_t j = 0; j < tier.ratio; ++j) {
      tier.upsample.emplace_back(hidden, hidden, true, InitSpec::he_fan_in(), rng);
    }
    tiers_.push_back(std::move(tier));
  }
  const std::size_t fs1 = cfg.frame_size(1);
  std::size_t out = static_cast<std::size_t>(cfg.q);
  switch (cfg.variant) {
    case Variant::kDefault:
      embedding_ = Embedding<T>(static_cast<std::size_t>(cfg.q), cfg.embed_dim, rng);
      sample_input_ = WeightNormLinear<T>(fs1 * cfg.embed_dim, hidden, true, InitSpec::he_fan_in(), rng);
      break;
    case Variant::kNoEmbedding:
      sample_input_ = WeightNormLinear<T>(fs1, hidden, true, InitSpec::he_fan_in(), rng);
      break;
    case Variant::kGmm:
      sample_input_ = WeightNormLinear<T>(fs1, hidden, true, InitSpec::he_fan_in(), rng);
      out = 3 * cfg.gmm_components;
      break;
    case Variant::kMultiSoftmax:
      out = fs1 * static_cast<std::size_t>(cfg.q);
      break;
  }
  mlp_ = Mlp<T>(hidden, cfg.mlp_width(), out, cfg.zero_output, rng);
}

template <typename T>
ParameterList<T> SampleRnn<T>::parameters() const {
  ParameterList<T> out;
  for (const auto& tier : tiers_) {
    const std::string name = "tier" + std::to_string(tier.index);
    if (!tier.top) tier.input_map.collect(out, name + ".wx");
    for (std::size_t l = 0; l < tier.layers.size(); ++l) tier.layers[l].collect(out, name + ".rnn" + std::to_string(l));
    for (std::size_t j = 0; j < tier.upsample.size(); ++j) tier.upsample[j].collect(out, name + ".up" + std::to_string(j));
  }
  if (embedding_.table().defined()) embedding_.collect(out, "embedding");
  if (sample_input_.direction().defined()) sample_input_.collect(out, "sample.wx");
  mlp_.collect(out, "mlp");
  return out;
}

template <typename T>
ModelState<T> SampleRnn<T>::initial_state(std::size_t rows) const {
  ModelState<T> st;
  st.rows = rows;
  st.fresh.assign(rows, true);
  const std::size_t width = rows * this->cfg_.hidden;
  for (const auto& tier : tiers_) {
    for (const auto& layer : tier.layers) {
      typename ModelState<T>::Layer slot;
      slot.h.assign(width, T{0});
      if (layer.kind() == CellKind::kLstm) slot.c.assign(width, T{0});
      st.layers.push_back(std::move(slot));
    }
  }
  return st;
}

template <typename T>
TierLayerState<T> SampleRnn<T>::initial_tier_state(std::size_t k, std::size_t rows) const {
  const FrameTier<T>& t = tier(k);
  const std::vector<T> zeros(rows * this->cfg_.hidden, T{0});
  const std::vector<bool> fresh(rows, true);
  TierLayerState<T> st;
  for (const auto& layer : t.layers) {
    st.h.push_back(ops::blend_rows(layer.initial_hidden(), std::span<const T>(zeros), fresh));
    if (layer.kind() == CellKind::kLstm) {
      st.c.push_back(ops::blend_rows(layer.initial_cell(), std::span<const T>(zeros), fresh));
    }
  }
  return st;
}

template <typename T>
TierActivation<T> SampleRnn<T>::tier_step(const FrameTier<T>& t, const typename FrameTier<T>::Bound& bound,
                                          TierLayerState<T>& state, const Tensor<T>& frame,
                                          const Tensor<T>* c_above) const {
  if (t.top != (c_above == nullptr)) {
    throw ContractError("frame_tier_step: tier " + std::to_string(t.index) +
                        (t.top ? " is the top tier and takes no conditioning" : " needs conditioning from above"));
  }
  if (frame.rank() != 2 || frame.dim(1) != t.frame) {
    throw DimensionError("frame_tier_step: frame " + shape_string(frame.shape()) + " for FS=" + std::to_string(t.frame));
  }
  if (state.h.size() != t.layers.size()) throw ContractError("frame_tier_step: state has the wrong layer count");
  TierActivation<T> act;
  act.input = t.top ? frame : ops::add((*bound.input)(frame), *c_above);
  Tensor<T> x = act.input;
  const std::size_t hidden = this->cfg_.hidden;
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    const CellWeights<T>& cell = bound.cells[l];
    const Tensor<T> gx = cell.input(x);
    if (t.layers[l].kind() == CellKind::kGru) {
      state.h[l] = ops::gru_cell(gx, state.h[l], cell.recurrent);
    } else {
      const Tensor<T> hc = ops::lstm_cell(gx, state.h[l], state.c.at(l), cell.recurrent);
      state.h[l] = ops::slice_cols(hc, 0, hidden);
      state.c[l] = ops::slice_cols(hc, hidden, hidden);
    }
    x = state.h[l];
  }
  act.hidden = x;
  for (const auto& up : bound.upsample) act.conditioning.push_back(up(x));
  return act;
}

template <typename T>
TierActivation<T> SampleRnn<T>::frame_tier_step(std::size_t k, TierLayerState<T>& state, const Tensor<T>& frame,
                                                const Tensor<T>* c_above) const {
  const FrameTier<T>& t = tier(k);
  return tier_step(t, t.bind(), state, frame, c_above);
}

template <typename T>
std::vector<Tensor<T>> SampleRnn<T>::upsample(std::size_t k, const Tensor<T>& h) const {
  std::vector<Tensor<T>> out;
  for (const auto& up : tier(k).upsample) out.push_back(up.forward(h));
  return out;
}

template <typename T>
typename SampleRnn<T>::BoundSample SampleRnn<T>::bind_sample() const {
  BoundSample out{std::nullopt, mlp_.bind()};
  if (sample_input_.direction().defined()) out.input = sample_input_.bind();
  return out;
}

template <typename T>
Tensor<T> SampleRnn<T>::sample_level(const BoundSample& bound, std::span<const int> bins, std::span<const T> reals,
                                     const Tensor<T>& c) const {
  if (c.rank() != 2 || c.dim(1) != this->cfg_.hidden) {
    throw DimensionError("sample_level_forward: conditioning " + shape_string(c.shape()));
  }
  if (this->cfg_.variant == Variant::kMultiSoftmax) return bound.mlp(c);
  const std::size_t rows = c.dim(0);
  const std::size_t fs1 = this->cfg_.frame_size(1);
  Tensor<T> features;
  if (embedded()) {
    if (bins.size() != rows * fs1) {
      throw ContractError("sample_level_forward: window holds " + std::to_string(bins.size()) + " bins, expected " +
                          std::to_string(rows * fs1));
    }
    features = ops::reshape(embedding_.lookup(bins), {rows, fs1 * this->cfg_.embed_dim});
  } else {
    if (reals.size() != rows * fs1) {
      throw ContractError("sample_level_forward: window holds " + std::to_string(reals.size()) + " values, expected " +
                          std::to_string(rows * fs1));
    }
    features = Tensor<T>(Shape{rows, fs1}, std::vector<T>(reals.begin(), reals.end()));
  }
  return bound.mlp(ops::add((*bound.input)(features), c));
}

template <typename T>
Tensor<T> SampleRnn<T>::sample_level_forward(std::span<const int> bins, std::span<const T> reals,
                                             const Tensor<T>& c) const {
  return sample_level(bind_sample(), bins, reals, c);
}

template <typename T>
Tensor<T> SampleRnn<T>::forward(const Batch<T>& batch, ModelState<T>& state) const {
  this->check_batch(batch, state);
  const ModelConfig& cfg = this->cfg_;
  const std::size_t rows = batch.rows, len = batch.length, width = batch.width(), off = batch.history;
  if (state.layers.size() != initial_state(0).layers.size()) throw ContractError("state does not match the model");

  std::vector<std::size_t> slot_base(tiers_.size() + 1, 0);
  for (std::size_t i = 0; i < tiers_.size(); ++i) slot_base[i + 1] = slot_base[i] + tiers_[i].layers.size();

  Tensor<T> cond;
  for (std::size_t k = cfg.tiers(); k >= 2; --k) {
    const FrameTier<T>& t = tier(k);
    const auto bound = t.bind();
    const std::size_t period = cfg.period(k), steps = len / period, fs = t.frame;
    std::vector<T> frames(rows * steps * fs);
    for (std::size_t b = 0; b < rows; ++b) {
      for (std::size_t s = 0; s < steps; ++s) {
        const T* src = batch.inputs.data() + b * width + off + s * period - fs;
        std::copy_n(src, fs, frames.data() + (b * steps + s) * fs);
      }
    }
    Tensor<T> x(Shape{rows * steps, fs}, std::move(frames));
    if (!t.top) x = ops::add((*bound.input)(x), cond);
    for (std::size_t l = 0; l < t.layers.size(); ++l) {
      auto& slot = state.layers[slot_base[k - 2] + l];
      const RecurrentLayer<T>& layer = t.layers[l];
      const Tensor<T> h0 = ops::blend_rows(layer.initial_hidden(), std::span<const T>(slot.h), state.fresh);
      Tensor<T> c0;
      if (layer.kind() == CellKind::kLstm) {
        c0 = ops::blend_rows(layer.initial_cell(), std::span<const T>(slot.c), state.fresh);
      }
      SequenceRun<T> run = run_sequence(layer.kind(), bound.cells[l], x, steps, h0, c0);
      x = run.outputs;
      auto hv = run.last_hidden.values();
      slot.h.assign(hv.begin(), hv.end());
      if (layer.kind() == CellKind::kLstm) {
        auto cv = run.last_cell.values();
        slot.c.assign(cv.begin(), cv.end());
      }
    }
    std::vector<Tensor<T>> parts;
    parts.reserve(bound.upsample.size());
    for (const auto& up : bound.upsample) parts.push_back(up(x));
    cond = parts.size() == 1 ? parts[0] : ops::interleave_rows(parts);
  }

  const BoundSample sample = bind_sample();
  Tensor<T> out;
  if (cfg.variant == Variant::kMultiSoftmax) {
    out = ops::reshape(sample_level(sample, {}, {}, cond), {rows * len, static_cast<std::size_t>(cfg.q)});
  } else {
    const std::size_t fs1 = cfg.frame_size(1);
    std::vector<int> bins;
    std::vector<T> reals;
    if (embedded()) {
      bins.resize(rows * len * fs1);
    } else {
      reals.resize(rows * len * fs1);
    }
    for (std::size_t b = 0; b < rows; ++b) {
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t src = b * width + off + j - fs1;
        const std::size_t dst = (b * len + j) * fs1;
        if (embedded()) {
          std::copy_n(batch.bins.data() + src, fs1, bins.data() + dst);
        } else {
          std::copy_n(batch.inputs.data() + src, fs1, reals.data() + dst);
        }
      }
    }
    out = sample_level(sample, bins, reals, cond);
  }
  std::fill(state.fresh.begin(), state.fresh.end(), false);
  return out;
}

template <typename T>
GenerationResult SampleRnn<T>::generate(const GenerateOptions& options) const {
  NoGradScope<T> no_grad;
  const ModelConfig& cfg = this->cfg_;
  if (options.samples == 0) throw ContractError("generate: need at least one sample");
  Rng rng(options.seed);
  const std::size_t n = options.samples, off = history(), k_top = cfg.tiers();
  const std::size_t fs1 = cfg.frame_size(1), unit = cfg.sample_unit(), width = this->output_width();
  const int silence = cfg.quantizer().silence_bin();

  std::vector<int> bins(off + n, silence);
  std::vector<T> inputs(off + n, static_cast<T>(this->silence_input()));

  std::vector<typename FrameTier<T>::Bound> bound;
  std::vector<TierLayerState<T>> states;
  for (std::size_t k = 2; k <= k_top; ++k) {
    bound.push_back(tier(k).bind());
    states.push_back(initial_tier_state(k, 1));
  }
  const BoundSample sample = bind_sample();
  std::vector<std::vector<Tensor<T>>> pending(k_top + 1);
  std::vector<std::size_t> cursor(k_top + 1, 0);

  GenerationResult result;
  result.bins.reserve(n);
  result.amplitudes.reserve(n);
  result.output_width = width;
  Tensor<T> unit_out;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = k_top; k >= 2; --k) {
      if (i % cfg.period(k) != 0) continue;
      const std::size_t fs = cfg.frame_size(k);
      Tensor<T> frame(Shape{1, fs}, std::vector<T>(inputs.begin() + static_cast<std::ptrdiff_t>(off + i - fs),
                                                  inputs.begin() + static_cast<std::ptrdiff_t>(off + i)));
      const Tensor<T>* above = k < k_top ? &pending[k + 1].at(cursor[k + 1]++) : nullptr;
      TierActivation<T> act = tier_step(tier(k), bound[k - 2], states[k - 2], frame, above);
      pending[k] = std::move(act.conditioning);
      cursor[k] = 0;
    }
    if (i % unit == 0) {
      const Tensor<T>& c = pending[2].at(cursor[2]++);
      const std::size_t from = off + i - fs1;
      unit_out = sample_level(sample, std::span<const int>(bins.data() + from, fs1),
                              std::span<const T>(inputs.data() + from, fs1), c);
    }
    const std::span<const T> row = unit_out.values().subspan((i % unit) * width, width);
    const bool silent = options.silence && i >= options.silence->start && i - options.silence->start < options.silence->length;
    const auto e = this->emit(row, silent, options.temperature, rng);
    bins[off + i] = e.bin;
    inputs[off + i] = static_cast<T>(e.input);
    result.bins.push_back(e.bin);
    result.amplitudes.push_back(e.amplitude);
    if (options.record_outputs) result.outputs.insert(result.outputs.end(), row.begin(), row.end());
  }
  return result;
}

template struct FrameTier<float>;
template struct FrameTier<double>;
template class SampleRnn<float>;
template class SampleRnn<double>;

}  // namespace samplernn
