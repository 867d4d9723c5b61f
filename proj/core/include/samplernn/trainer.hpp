#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "samplernn/audio.hpp"
#include "samplernn/checkpoint.hpp"
#include "samplernn/model.hpp"

namespace samplernn {

inline constexpr double kLn2 = 0.69314718055994530942;

struct TrainConfig {
  std::size_t subseq_len = 512;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip = 1.0;  // gradients clamped to [-clip, clip]
  std::size_t max_steps = 1000;
  std::size_t eval_every = 100;
  std::size_t patience = 0;  // eval points without improvement; 0 disables
  std::uint64_t seed = 0;
  std::size_t eval_length = 0;     // 0: subseq_len
  std::size_t eval_sequences = 0;  // validation sequences per eval point; 0: all
  std::size_t checkpoint_every = 0;  // step_N.ckpt cadence; 0: only last/best

  std::size_t effective_eval_length() const { return eval_length == 0 ? subseq_len : eval_length; }

  /// Raises ConfigError naming the offending `train.*` field.
  void validate(const ModelConfig& model) const;
  void set(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;
  static TrainConfig from_entries(const std::map<std::string, std::string>& kv);
};

/// One length-L window of a sequence. Targets are samples [offset, offset +
/// length); the `history` samples before `offset` (silence before the start)
/// feed the upper tiers. `valid` counts targets inside the sequence.
struct Subsequence {
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t valid = 0;
};

enum class Remainder { kDrop, kPad };

/// Raises ConfigError when `L` is not a positive multiple of `multiple`.
std::vector<Subsequence> split_subsequences(std::size_t total, std::size_t L, std::size_t multiple,
                                            Remainder remainder = Remainder::kDrop,
                                            std::vector<std::string>* warnings = nullptr);

/// The `history` amplitudes preceding a subsequence, silence-filled.
std::vector<double> history_window(std::span<const double> samples, const Subsequence& sub, std::size_t history);

/// Writes one batch row from an encoded sequence; out-of-range positions get
/// the silence token and zero weight.
template <typename T>
void fill_batch_row(Batch<T>& batch, std::size_t row, const EncodedSequence& seq, std::size_t offset,
                    int silence_bin, T silence_input);

template <typename T>
Batch<T> make_batch(std::size_t rows, std::size_t length, std::size_t history);

struct OptimState {
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m, v;  // aligned with the parameter list

  void reset(std::span<const std::size_t> sizes);
  bool matches(std::span<const std::size_t> sizes) const;
};

/// Bias-corrected Adam on already clipped gradients; parameters without a
/// gradient buffer are treated as having zero gradient.
template <typename T>
void adam_update(ParameterList<T>& params, OptimState& optim, const TrainConfig& cfg);

struct StepResult {
  double bits = 0.0;  // weighted mean NLL of the batch
  double weight = 0.0;
  bool updated = false;
};

/// Forward with teacher forcing, masked loss, backward truncated at the
/// subsequence start, clip and Adam. `state` advances to the end of the batch.
template <typename T>
StepResult tbptt_step(SequenceModel<T>& model, const Batch<T>& batch, ModelState<T>& state, OptimState& optim,
                      const TrainConfig& cfg);

struct EvalResult {
  double bits = 0.0;  // mean over all predicted positions
  double total_bits = 0.0;
  std::size_t positions = 0;
  std::vector<double> per_sequence;  // mean bits of each sequence
};

/// Stateful NLL over whole sequences cut into length-L pieces; remainders are
/// padded and masked. Up to `rows` sequences run side by side.
template <typename T>
EvalResult evaluate_nll(const SequenceModel<T>& model, const std::vector<AudioSequence>& split, std::size_t L,
                        std::size_t rows = 16);

template <typename T>
EvalResult evaluate_nll_encoded(const SequenceModel<T>& model, const std::vector<EncodedSequence>& split,
                                std::size_t L, std::size_t rows = 16);

/// Per-row cursor over the shuffled training sequences. Each row streams
/// one sequence's subsequences in order, then takes the next sequence and
/// reports the reset so the row's carried state can be reinitialised.
class SubsequenceStream {
 public:
  SubsequenceStream() = default;
  SubsequenceStream(std::vector<std::size_t> lengths, std::size_t rows, std::size_t L, std::uint64_t seed);

  struct Slot {
    std::size_t sequence = 0;
    std::size_t offset = 0;
    bool reset = false;
  };
  /// Positions for the next batch, one per row.
  std::vector<Slot> next();

  std::size_t epoch() const { return epoch_; }
  std::string serialize() const;
  void deserialize(const std::string& text);

 private:
  std::size_t draw();

  std::vector<std::size_t> lengths_;
  std::size_t L_ = 0;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t next_ = 0;
  std::size_t epoch_ = 0;
  struct Row {
    bool active = false;
    std::size_t sequence = 0;
    std::size_t offset = 0;
  };
  std::vector<Row> rows_;
};

struct MetricsRow {
  std::size_t step = 0;
  double train_bits = 0.0;
  double valid_bits = 0.0;
};

std::string format_metrics_row(const MetricsRow& row);

struct TrainSummary {
  std::size_t steps = 0;
  double best_valid = 0.0;
  std::size_t best_step = 0;
  bool early_stopped = false;
  std::vector<MetricsRow> metrics;
};

/// Stateful TBPTT training over a corpus with periodic validation, metrics
/// logging and checkpointing.
template <typename T>
class Trainer {
 public:
  /// Fresh model seeded from `cfg.seed`. A real-valued model gets its
  /// NormStats from the training split when they are still the identity.
  Trainer(ModelConfig model_cfg, TrainConfig cfg, const Corpus& corpus);
  /// Continues from a training checkpoint; `cfg` may change step budgets.
  Trainer(const Checkpoint& ckpt, const Corpus& corpus, std::optional<TrainConfig> cfg = std::nullopt);

  SequenceModel<T>& model() { return *model_; }
  const SequenceModel<T>& model() const { return *model_; }
  const TrainConfig& config() const { return cfg_; }
  std::size_t step_count() const { return step_; }

  /// One optimisation step on the next streamed batch.
  StepResult step();
  EvalResult validate() const;

  /// Trains until `max_steps` or early stop. Writes metrics.tsv, last.ckpt
  /// and best.ckpt into `out_dir` when it is non-empty.
  TrainSummary run(const std::filesystem::path& out_dir = {}, std::ostream* progress = nullptr);

  Checkpoint checkpoint() const;

 private:
  void setup(const Corpus& corpus);
  void save(const std::filesystem::path& path) const;

  ModelConfig model_cfg_;
  TrainConfig cfg_;
  std::unique_ptr<SequenceModel<T>> model_;
  std::vector<EncodedSequence> train_, valid_;
  SubsequenceStream stream_;
  ModelState<T> state_;
  OptimState optim_;
  Batch<T> batch_;
  std::size_t step_ = 0;
  double window_bits_ = 0.0;  // training loss accumulated since the last eval point
  std::size_t window_steps_ = 0;
  double best_valid_ = 0.0;
  std::size_t best_step_ = 0;
  std::size_t stale_evals_ = 0;
  bool has_best_ = false;
};

/// Parameters plus model config, loadable for evaluation and generation.
template <typename T>
void write_model(Checkpoint& ckpt, const SequenceModel<T>& model);
template <typename T>
std::unique_ptr<SequenceModel<T>> read_model(const Checkpoint& ckpt);

/// Trains one ablation variant with the shared recipe and returns the best
/// validation NLL in bits.
template <typename T>
double train_variant(Variant variant, ModelConfig model_cfg, const TrainConfig& cfg, const Corpus& corpus,
                     TrainSummary* summary = nullptr);

}  // namespace samplernn
