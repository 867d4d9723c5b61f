#include "samplernn/model.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <sstream>

#include "samplernn/baseline_rnn.hpp"
#include "samplernn/errors.hpp"
#include "samplernn/parse.hpp"
#include "samplernn/sample_rnn.hpp"

namespace samplernn {

std::string to_string(Architecture a) { return a == Architecture::kSampleRnn ? "samplernn" : "baseline"; }

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kDefault:
      return "default";
    case Variant::kNoEmbedding:
      return "no_embedding";
    case Variant::kMultiSoftmax:
      return "multisoftmax";
    case Variant::kGmm:
      return "gmm";
  }
  return "default";
}

std::string to_string(CellKind c) { return c == CellKind::kGru ? "gru" : "lstm"; }

Variant parse_variant(const std::string& text) {
  for (const Variant v : {Variant::kDefault, Variant::kNoEmbedding, Variant::kMultiSoftmax, Variant::kGmm}) {
    if (to_string(v) == text) return v;
  }
  throw ConfigError("model.variant", "unknown variant '" + text + "'");
}

namespace {

std::vector<std::size_t> default_frames(std::size_t tiers) {
  if (tiers == 2) return {2, 2};
  if (tiers == 3) return {2, 2, 8};
  throw ConfigError("model.tiers", "no default frame sizes for " + std::to_string(tiers) + " tiers; set model.frame_sizes");
}

}  // namespace

std::size_t ModelConfig::layers_of(std::size_t k) const {
  if (arch == Architecture::kBaseline) return layers.empty() ? 1 : layers.front();
  if (layers.empty()) return tiers() == 2 ? 3 : 1;
  return layers.at(k - 2);
}

void ModelConfig::validate() const {
  if (hidden == 0) throw ConfigError("model.hidden", "must be positive");
  quantizer().validate();
  if (embed_dim == 0) throw ConfigError("model.embed_dim", "must be positive");
  if (variant == Variant::kGmm && gmm_components == 0) throw ConfigError("model.gmm_components", "must be positive");
  if (!(norm.std > 0.0)) throw ConfigError("model.norm_std", "must be positive");
  if (arch == Architecture::kBaseline) {
    if (variant != Variant::kDefault) throw ConfigError("model.variant", "the baseline supports only the default variant");
    if (layers.size() > 1 || (!layers.empty() && layers[0] == 0)) {
      throw ConfigError("model.layers", "the baseline takes a single positive depth");
    }
    return;
  }
  const std::size_t k_top = tiers();
  if (k_top < 2) throw ConfigError("model.frame_sizes", "need at least 2 tiers");
  for (std::size_t k = 1; k <= k_top; ++k) {
    if (frame_size(k) == 0) throw ConfigError("model.frame_sizes", "frame sizes must be positive");
  }
  for (std::size_t k = 3; k <= k_top; ++k) {
    if (frame_size(k) % frame_size(k - 1) != 0) {
      throw ConfigError("model.frame_sizes", "FS(" + std::to_string(k) + ")=" + std::to_string(frame_size(k)) +
                                                 " is not a multiple of FS(" + std::to_string(k - 1) +
                                                 ")=" + std::to_string(frame_size(k - 1)));
    }
  }
  if (frame_sizes.back() < frame_size(1)) {
    throw ConfigError("model.frame_sizes", "the top frame must span at least FS(1) samples");
  }
  if (variant == Variant::kMultiSoftmax && frame_size(2) % frame_size(1) != 0) {
    throw ConfigError("model.frame_sizes", "multisoftmax needs FS(2) to be a multiple of FS(1)");
  }
  if (!layers.empty()) {
    if (layers.size() != k_top - 1) {
      throw ConfigError("model.layers", "expected " + std::to_string(k_top - 1) + " entries (tiers 2..K), got " +
                                            std::to_string(layers.size()));
    }
    if (std::find(layers.begin(), layers.end(), 0u) != layers.end()) {
      throw ConfigError("model.layers", "depths must be positive");
    }
  }
}

void ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "model.arch") {
    if (value == "samplernn") {
      arch = Architecture::kSampleRnn;
    } else if (value == "baseline") {
      arch = Architecture::kBaseline;
    } else {
      throw ConfigError(key, "expected samplernn or baseline, got '" + value + "'");
    }
  } else if (key == "model.tiers") {
    frame_sizes = default_frames(parse_count(key, value));
  } else if (key == "model.frame_sizes") {
    frame_sizes = parse_list(key, value);
  } else if (key == "model.hidden") {
    hidden = parse_count(key, value);
  } else if (key == "model.cell") {
    if (value == "gru") {
      cell = CellKind::kGru;
    } else if (value == "lstm") {
      cell = CellKind::kLstm;
    } else {
      throw ConfigError(key, "expected gru or lstm, got '" + value + "'");
    }
  } else if (key == "model.layers") {
    layers = parse_list(key, value);
  } else if (key == "model.variant" || key == "model.head") {
    variant = parse_variant(value);
  } else if (key == "model.q") {
    q = static_cast<int>(parse_count(key, value));
  } else if (key == "model.embed_dim") {
    embed_dim = parse_count(key, value);
  } else if (key == "model.mlp_hidden") {
    mlp_hidden = parse_count(key, value);
  } else if (key == "model.gmm_components") {
    gmm_components = parse_count(key, value);
  } else if (key == "model.zero_output") {
    zero_output = parse_bool(key, value);
  } else if (key == "model.norm_mean") {
    norm.mean = parse_real(key, value);
  } else if (key == "model.norm_std") {
    norm.std = parse_real(key, value);
  } else {
    throw ConfigError(key, "unknown key");
  }
}

std::vector<std::pair<std::string, std::string>> ModelConfig::entries() const {
  std::vector<std::size_t> depth;
  if (arch == Architecture::kBaseline) {
    depth.push_back(layers_of(2));
  } else {
    for (std::size_t k = 2; k <= tiers(); ++k) depth.push_back(layers_of(k));
  }
  return {
      {"model.arch", to_string(arch)},
      {"model.frame_sizes", join_list(frame_sizes)},
      {"model.hidden", std::to_string(hidden)},
      {"model.cell", to_string(cell)},
      {"model.layers", join_list(depth)},
      {"model.variant", to_string(variant)},
      {"model.q", std::to_string(q)},
      {"model.embed_dim", std::to_string(embed_dim)},
      {"model.mlp_hidden", std::to_string(mlp_width())},
      {"model.gmm_components", std::to_string(gmm_components)},
      {"model.zero_output", zero_output ? "true" : "false"},
      {"model.norm_mean", format_exact(norm.mean)},
      {"model.norm_std", format_exact(norm.std)},
  };
}

ModelConfig ModelConfig::from_entries(const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  // Frame sizes given explicitly win over the tier-count shorthand.
  if (const auto it = kv.find("model.tiers"); it != kv.end()) cfg.set(it->first, it->second);
  for (const auto& [key, value] : kv) {
    if (key.rfind("model.", 0) != 0 || key == "model.tiers") continue;
    cfg.set(key, value);
  }
  if (const auto it = kv.find("model.tiers"); it != kv.end() && kv.count("model.frame_sizes")) {
    if (cfg.tiers() != parse_count(it->first, it->second)) {
      throw ConfigError("model.tiers", "disagrees with the length of model.frame_sizes");
    }
  }
  return cfg;
}

template <typename T>
std::size_t SequenceModel<T>::output_width() const {
  return cfg_.continuous() ? 3 * cfg_.gmm_components : static_cast<std::size_t>(cfg_.q);
}

template <typename T>
double SequenceModel<T>::input_value(int bin, double amplitude) const {
  if (cfg_.continuous()) return standardize(amplitude, cfg_.norm);
  return 2.0 * dequantize(bin, cfg_.quantizer());
}

template <typename T>
EncodedSequence SequenceModel<T>::encode(std::span<const double> amplitudes) const {
  EncodedSequence out;
  out.bins = quantize(amplitudes, cfg_.quantizer());
  out.inputs.resize(amplitudes.size());
  for (std::size_t i = 0; i < amplitudes.size(); ++i) out.inputs[i] = input_value(out.bins[i], amplitudes[i]);
  return out;
}

template <typename T>
void SequenceModel<T>::check_batch(const Batch<T>& batch, const ModelState<T>& state) const {
  if (batch.history != history()) {
    throw ContractError("batch carries " + std::to_string(batch.history) + " history samples, the model needs " +
                        std::to_string(history()));
  }
  if (batch.length == 0 || batch.length % length_multiple() != 0) {
    throw ContractError("subsequence length " + std::to_string(batch.length) + " is not a positive multiple of " +
                        std::to_string(length_multiple()));
  }
  const std::size_t cells = batch.rows * batch.width();
  if (batch.bins.size() != cells || batch.inputs.size() != cells) {
    throw DimensionError("batch buffers do not match rows x (history + length)");
  }
  if (!batch.weights.empty() && batch.weights.size() != batch.rows * batch.length) {
    throw DimensionError("batch weights do not match rows x length");
  }
  if (state.rows != batch.rows || state.fresh.size() != batch.rows) {
    throw ContractError("state has " + std::to_string(state.rows) + " rows, batch has " + std::to_string(batch.rows));
  }
}

template <typename T>
Tensor<T> SequenceModel<T>::loss(const Tensor<T>& outputs, const Batch<T>& batch, std::vector<double>* per_row) const {
  const std::size_t n = batch.rows * batch.length;
  if (cfg_.continuous()) {
    std::vector<T> targets(n);
    for (std::size_t b = 0; b < batch.rows; ++b) {
      for (std::size_t j = 0; j < batch.length; ++j) {
        targets[b * batch.length + j] = batch.inputs[b * batch.width() + batch.history + j];
      }
    }
    return ops::gmm_nll(outputs, std::span<const T>(targets), std::span<const T>(batch.weights), per_row);
  }
  std::vector<int> targets(n);
  for (std::size_t b = 0; b < batch.rows; ++b) {
    for (std::size_t j = 0; j < batch.length; ++j) {
      targets[b * batch.length + j] = batch.bins[b * batch.width() + batch.history + j];
    }
  }
  return ops::softmax_cross_entropy(outputs, std::span<const int>(targets), std::span<const T>(batch.weights), per_row);
}

template <typename T>
typename SequenceModel<T>::Emitted SequenceModel<T>::emit(std::span<const T> row, bool silent, double temperature,
                                                          Rng& rng) const {
  const QuantizerConfig qc = cfg_.quantizer();
  if (silent) return {qc.silence_bin(), 0.0, input_value(qc.silence_bin(), 0.0)};
  if (cfg_.continuous()) {
    const double z = GmmHead{cfg_.gmm_components}.sample(row, rng);
    const double amp = std::clamp(destandardize(z, cfg_.norm), -1.0, 1.0);
    const int bin = quantize(amp, qc);
    return {bin, amp, input_value(bin, amp)};
  }
  const int bin = sample_categorical(row, temperature, rng);
  const double amp = reconstruct(bin, qc);
  return {bin, amp, input_value(bin, amp)};
}

template <typename T>
std::unique_ptr<SequenceModel<T>> make_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  if (cfg.arch == Architecture::kBaseline) return std::make_unique<BaselineRnn<T>>(cfg, rng);
  return std::make_unique<SampleRnn<T>>(cfg, rng);
}

template class SequenceModel<float>;
template class SequenceModel<double>;
template std::unique_ptr<SequenceModel<float>> make_model<float>(const ModelConfig&, std::uint64_t);
template std::unique_ptr<SequenceModel<double>> make_model<double>(const ModelConfig&, std::uint64_t);

}  // namespace samplernn
