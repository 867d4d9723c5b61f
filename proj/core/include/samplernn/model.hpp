#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "samplernn/cells.hpp"
#include "samplernn/quantizer.hpp"

namespace samplernn {

enum class Architecture { kSampleRnn, kBaseline };

/// Input/output path of the sample-level module.
enum class Variant { kDefault, kNoEmbedding, kMultiSoftmax, kGmm };

std::string to_string(Architecture a);
std::string to_string(Variant v);
std::string to_string(CellKind c);
Variant parse_variant(const std::string& text);

struct ModelConfig {
  Architecture arch = Architecture::kSampleRnn;
  std::vector<std::size_t> frame_sizes{2, 2, 8};  // FS(1) .. FS(K)
  std::size_t hidden = 64;
  CellKind cell = CellKind::kGru;
  /// Recurrent depth of tiers 2..K (baseline: one entry). Empty selects
  /// 3 layers for a 2-tier model and 1 layer per tier otherwise.
  std::vector<std::size_t> layers;
  Variant variant = Variant::kDefault;
  int q = 256;
  std::size_t embed_dim = 16;
  std::size_t mlp_hidden = 0;  // 0: same as hidden
  std::size_t gmm_components = 4;
  bool zero_output = true;
  NormStats norm;  // real-valued path only

  std::size_t tiers() const { return frame_sizes.size(); }
  std::size_t frame_size(std::size_t k) const { return frame_sizes.at(k - 1); }
  /// Clock period of tier k in samples: 1 for the sample level, FS(k) above.
  std::size_t period(std::size_t k) const { return k == 1 ? 1 : frame_size(k); }
  /// Samples produced per sample-level evaluation (FS(1) for multisoftmax).
  std::size_t sample_unit() const { return variant == Variant::kMultiSoftmax ? frame_size(1) : 1; }
  /// Conditioning vectors tier k emits per step.
  std::size_t ratio(std::size_t k) const { return period(k) / (k == 2 ? sample_unit() : period(k - 1)); }
  std::size_t layers_of(std::size_t k) const;
  std::size_t mlp_width() const { return mlp_hidden == 0 ? hidden : mlp_hidden; }
  bool continuous() const { return variant == Variant::kGmm; }
  QuantizerConfig quantizer() const { return {q}; }

  /// Raises ConfigError naming the offending field.
  void validate() const;

  /// `key` is a `model.*` name as used in run configs and checkpoints.
  void set(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;
  static ModelConfig from_entries(const std::map<std::string, std::string>& kv);
};

/// Bins and real-valued tier inputs of one sequence.
struct EncodedSequence {
  std::vector<int> bins;
  std::vector<double> inputs;

  std::size_t size() const { return bins.size(); }
};

/// Teacher-forcing batch. Row b holds `history` context samples followed by
/// `length` samples to predict; `bins` and `inputs` are [rows x (history +
/// length)] and `weights` is [rows x length] (empty means all ones).
template <typename T>
struct Batch {
  std::size_t rows = 0;
  std::size_t length = 0;
  std::size_t history = 0;
  std::vector<int> bins;
  std::vector<T> inputs;
  std::vector<T> weights;

  std::size_t width() const { return history + length; }
};

/// Recurrent state carried across subsequences, one slot per tier layer.
/// Rows flagged fresh start from the learnable initial state instead.
template <typename T>
struct ModelState {
  struct Layer {
    std::vector<T> h, c;  // [rows x H]
  };
  std::size_t rows = 0;
  std::vector<Layer> layers;
  std::vector<bool> fresh;

  void reset_row(std::size_t b) { fresh.at(b) = true; }
};

struct SilenceWindow {
  std::size_t start = 0;   // sample index
  std::size_t length = 0;  // samples
};

struct GenerateOptions {
  std::size_t samples = 16000;
  std::uint64_t seed = 0;
  std::optional<SilenceWindow> silence;
  double temperature = 1.0;
  bool record_outputs = false;
};

struct GenerationResult {
  std::vector<int> bins;
  std::vector<double> amplitudes;
  /// Per-sample output rows (logits or mixture parameters) when recorded.
  std::vector<double> outputs;
  std::size_t output_width = 0;
};

/// Common surface of the hierarchical model and the flat baseline.
template <typename T>
class SequenceModel {
 public:
  explicit SequenceModel(ModelConfig cfg) : cfg_(std::move(cfg)) {}
  virtual ~SequenceModel() = default;
  SequenceModel(const SequenceModel&) = delete;
  SequenceModel& operator=(const SequenceModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  /// Context samples each batch row must carry before its first target.
  virtual std::size_t history() const = 0;
  /// Subsequence lengths must be a multiple of this.
  virtual std::size_t length_multiple() const = 0;
  /// Output columns per predicted sample.
  std::size_t output_width() const;

  virtual ParameterList<T> parameters() const = 0;
  std::size_t parameter_count() const { return count_params(parameters()); }

  virtual ModelState<T> initial_state(std::size_t rows) const = 0;

  /// Teacher-forced pass; returns [rows*length x output_width] and advances
  /// `state` to the end of the batch.
  virtual Tensor<T> forward(const Batch<T>& batch, ModelState<T>& state) const = 0;

  /// Weighted mean NLL in nats of `outputs` against the batch targets;
  /// `per_row` (optional) receives the unweighted NLL of every position.
  Tensor<T> loss(const Tensor<T>& outputs, const Batch<T>& batch, std::vector<double>* per_row = nullptr) const;

  virtual GenerationResult generate(const GenerateOptions& options) const = 0;

  /// Maps amplitudes to bins and tier inputs.
  EncodedSequence encode(std::span<const double> amplitudes) const;
  /// Tier input value for a single amplitude / bin.
  double input_value(int bin, double amplitude) const;
  double silence_input() const { return input_value(cfg_.quantizer().silence_bin(), 0.0); }

 protected:
  struct Emitted {
    int bin;
    double amplitude;
    double input;
  };
  /// Draws the next sample from one output row, or the silence token.
  Emitted emit(std::span<const T> row, bool silent, double temperature, Rng& rng) const;
  void check_batch(const Batch<T>& batch, const ModelState<T>& state) const;
  ModelConfig cfg_;
};

template <typename T>
std::unique_ptr<SequenceModel<T>> make_model(const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
std::size_t count_params(const SequenceModel<T>& model) {
  return model.parameter_count();
}

}  // namespace samplernn
