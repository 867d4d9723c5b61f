#include "samplernn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "samplernn/errors.hpp"
#include "samplernn/init.hpp"
#include "samplernn/parse.hpp"

namespace samplernn {

namespace {

std::size_t length_multiple_of(const ModelConfig& model) {
  return model.arch == Architecture::kBaseline ? 1 : model.frame_sizes.back();
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = text.find(sep, start);
    out.push_back(text.substr(start, end == std::string::npos ? std::string::npos : end - start));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return out;
}

template <typename T>
std::string dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

void TrainConfig::validate(const ModelConfig& model) const {
  const std::size_t multiple = length_multiple_of(model);
  if (subseq_len == 0 || subseq_len % multiple != 0) {
    throw ConfigError("train.subseq_len", std::to_string(subseq_len) + " is not a positive multiple of FS(K)=" +
                                              std::to_string(multiple));
  }
  if (eval_length % multiple != 0) {
    throw ConfigError("train.eval_length", std::to_string(eval_length) + " is not a multiple of FS(K)=" +
                                               std::to_string(multiple));
  }
  if (batch_size == 0) throw ConfigError("train.batch_size", "must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("train.epsilon", "must be positive");
  if (!(clip > 0.0)) throw ConfigError("train.clip", "must be positive");
  if (eval_every == 0) throw ConfigError("train.eval_every", "must be at least 1");
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  if (key == "train.subseq_len") {
    subseq_len = parse_count(key, value);
  } else if (key == "train.batch_size") {
    batch_size = parse_count(key, value);
  } else if (key == "train.learning_rate") {
    learning_rate = parse_real(key, value);
  } else if (key == "train.beta1") {
    beta1 = parse_real(key, value);
  } else if (key == "train.beta2") {
    beta2 = parse_real(key, value);
  } else if (key == "train.epsilon") {
    epsilon = parse_real(key, value);
  } else if (key == "train.clip") {
    clip = parse_real(key, value);
  } else if (key == "train.max_steps") {
    max_steps = parse_count(key, value);
  } else if (key == "train.eval_every") {
    eval_every = parse_count(key, value);
  } else if (key == "train.patience") {
    patience = parse_count(key, value);
  } else if (key == "train.seed") {
    seed = parse_u64(key, value);
  } else if (key == "train.eval_length") {
    eval_length = parse_count(key, value);
  } else if (key == "train.eval_sequences") {
    eval_sequences = parse_count(key, value);
  } else if (key == "train.checkpoint_every") {
    checkpoint_every = parse_count(key, value);
  } else {
    throw ConfigError(key, "unknown key");
  }
}

std::vector<std::pair<std::string, std::string>> TrainConfig::entries() const {
  return {
      {"train.subseq_len", std::to_string(subseq_len)},
      {"train.batch_size", std::to_string(batch_size)},
      {"train.learning_rate", format_exact(learning_rate)},
      {"train.beta1", format_exact(beta1)},
      {"train.beta2", format_exact(beta2)},
      {"train.epsilon", format_exact(epsilon)},
      {"train.clip", format_exact(clip)},
      {"train.max_steps", std::to_string(max_steps)},
      {"train.eval_every", std::to_string(eval_every)},
      {"train.patience", std::to_string(patience)},
      {"train.seed", std::to_string(seed)},
      {"train.eval_length", std::to_string(eval_length)},
      {"train.eval_sequences", std::to_string(eval_sequences)},
      {"train.checkpoint_every", std::to_string(checkpoint_every)},
  };
}

TrainConfig TrainConfig::from_entries(const std::map<std::string, std::string>& kv) {
  TrainConfig cfg;
  for (const auto& [key, value] : kv) {
    if (key.rfind("train.", 0) == 0) cfg.set(key, value);
  }
  return cfg;
}

std::vector<Subsequence> split_subsequences(std::size_t total, std::size_t L, std::size_t multiple,
                                            Remainder remainder, std::vector<std::string>* warnings) {
  if (L == 0 || multiple == 0 || L % multiple != 0) {
    throw ConfigError("train.subseq_len", std::to_string(L) + " is not a positive multiple of FS(K)=" +
                                              std::to_string(multiple));
  }
  std::vector<Subsequence> out;
  for (std::size_t off = 0; off + L <= total; off += L) out.push_back({off, L, L});
  const std::size_t rest = total % L;
  if (rest != 0 && remainder == Remainder::kPad) out.push_back({total - rest, L, rest});
  if (out.empty() && warnings) {
    warnings->push_back("sequence of " + std::to_string(total) + " samples yields no subsequence of length " +
                        std::to_string(L));
  }
  return out;
}

std::vector<double> history_window(std::span<const double> samples, const Subsequence& sub, std::size_t history) {
  std::vector<double> out(history, 0.0);
  for (std::size_t i = 0; i < history; ++i) {
    if (sub.offset + i >= history && sub.offset + i - history < samples.size()) {
      out[i] = samples[sub.offset + i - history];
    }
  }
  return out;
}

template <typename T>
Batch<T> make_batch(std::size_t rows, std::size_t length, std::size_t history) {
  Batch<T> b;
  b.rows = rows;
  b.length = length;
  b.history = history;
  b.bins.assign(rows * b.width(), 0);
  b.inputs.assign(rows * b.width(), T{0});
  b.weights.assign(rows * length, T{1});
  return b;
}

template <typename T>
void fill_batch_row(Batch<T>& batch, std::size_t row, const EncodedSequence& seq, std::size_t offset,
                    int silence_bin, T silence_input) {
  if (row >= batch.rows) throw IndexError("fill_batch_row: row out of range");
  const std::size_t width = batch.width();
  int* bins = batch.bins.data() + row * width;
  T* inputs = batch.inputs.data() + row * width;
  for (std::size_t i = 0; i < width; ++i) {
    // position offset - history + i, computed without going negative
    const bool inside = offset + i >= batch.history && offset + i - batch.history < seq.size();
    if (inside) {
      const std::size_t src = offset + i - batch.history;
      bins[i] = seq.bins[src];
      inputs[i] = static_cast<T>(seq.inputs[src]);
    } else {
      bins[i] = silence_bin;
      inputs[i] = silence_input;
    }
  }
  if (batch.weights.size() != batch.rows * batch.length) batch.weights.assign(batch.rows * batch.length, T{1});
  T* w = batch.weights.data() + row * batch.length;
  for (std::size_t j = 0; j < batch.length; ++j) w[j] = offset + j < seq.size() ? T{1} : T{0};
}

void OptimState::reset(std::span<const std::size_t> sizes) {
  t = 0;
  m.assign(sizes.size(), {});
  v.assign(sizes.size(), {});
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    m[i].assign(sizes[i], 0.0);
    v[i].assign(sizes[i], 0.0);
  }
}

bool OptimState::matches(std::span<const std::size_t> sizes) const {
  if (m.size() != sizes.size() || v.size() != sizes.size()) return false;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (m[i].size() != sizes[i] || v[i].size() != sizes[i]) return false;
  }
  return true;
}

namespace {

template <typename T>
std::vector<std::size_t> sizes_of(const ParameterList<T>& params) {
  std::vector<std::size_t> out;
  for (const auto& p : params) out.push_back(p.tensor.size());
  return out;
}

}  // namespace

template <typename T>
void adam_update(ParameterList<T>& params, OptimState& optim, const TrainConfig& cfg) {
  const auto sizes = sizes_of(params);
  if (optim.t == 0 && !optim.matches(sizes)) optim.reset(sizes);
  if (!optim.matches(sizes)) throw ContractError("adam_update: optimiser state does not match the parameters");
  ++optim.t;
  const double t = static_cast<double>(optim.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = params[i].tensor;
    auto values = p.mutable_values();
    const bool has_grad = p.has_grad();
    std::span<T> grad;
    if (has_grad) grad = p.grad();
    auto& m = optim.m[i];
    auto& v = optim.v[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grad[j]) : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      const double step = cfg.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.epsilon);
      values[j] = static_cast<T>(static_cast<double>(values[j]) - step);
    }
  }
}

template <typename T>
StepResult tbptt_step(SequenceModel<T>& model, const Batch<T>& batch, ModelState<T>& state, OptimState& optim,
                      const TrainConfig& cfg) {
  ParameterList<T> params = model.parameters();
  for (auto& p : params) p.tensor.zero_grad();

  StepResult result;
  result.weight = batch.weights.empty() ? static_cast<double>(batch.rows * batch.length)
                                        : std::accumulate(batch.weights.begin(), batch.weights.end(), 0.0);
  Tape<T> tape;
  typename Tape<T>::Scope scope(tape);
  const Tensor<T> outputs = model.forward(batch, state);
  const Tensor<T> loss = model.loss(outputs, batch);
  const double nats = static_cast<double>(loss.item());
  if (!std::isfinite(nats)) {
    throw NumericError("non-finite training loss (" + std::to_string(nats) + ") at optimiser step " +
                       std::to_string(optim.t + 1) + " over " + std::to_string(batch.rows) + " rows");
  }
  result.bits = nats / kLn2;
  if (result.weight <= 0.0) return result;
  tape.backward(loss);
  clip_gradients(params, static_cast<T>(-cfg.clip), static_cast<T>(cfg.clip));
  adam_update(params, optim, cfg);
  result.updated = true;
  return result;
}

template <typename T>
EvalResult evaluate_nll_encoded(const SequenceModel<T>& model, const std::vector<EncodedSequence>& split,
                                std::size_t L, std::size_t rows) {
  if (split.empty()) throw DataError("evaluation split is empty");
  if (L == 0 || L % model.length_multiple() != 0) {
    throw ConfigError("train.eval_length", std::to_string(L) + " is not a positive multiple of FS(K)=" +
                                               std::to_string(model.length_multiple()));
  }
  rows = std::max<std::size_t>(1, rows);
  NoGradScope<T> no_grad;
  const int silence = model.config().quantizer().silence_bin();
  const T silence_input = static_cast<T>(model.silence_input());

  EvalResult result;
  result.per_sequence.assign(split.size(), 0.0);
  std::vector<double> sums(split.size(), 0.0);
  std::vector<double> per_row;
  for (std::size_t first = 0; first < split.size(); first += rows) {
    const std::size_t group = std::min(rows, split.size() - first);
    std::size_t longest = 0;
    for (std::size_t g = 0; g < group; ++g) longest = std::max(longest, split[first + g].size());
    const std::size_t pieces = (longest + L - 1) / L;
    Batch<T> batch = make_batch<T>(group, L, model.history());
    ModelState<T> state = model.initial_state(group);
    for (std::size_t p = 0; p < pieces; ++p) {
      for (std::size_t g = 0; g < group; ++g) fill_batch_row(batch, g, split[first + g], p * L, silence, silence_input);
      const Tensor<T> out = model.forward(batch, state);
      model.loss(out, batch, &per_row);
      for (std::size_t g = 0; g < group; ++g) {
        for (std::size_t j = 0; j < L; ++j) {
          if (batch.weights[g * L + j] != T{0}) sums[first + g] += per_row[g * L + j];
        }
      }
    }
  }
  for (std::size_t i = 0; i < split.size(); ++i) {
    const std::size_t n = split[i].size();
    result.positions += n;
    result.total_bits += sums[i] / kLn2;
    result.per_sequence[i] = n == 0 ? 0.0 : sums[i] / kLn2 / static_cast<double>(n);
  }
  if (result.positions == 0) throw DataError("evaluation split holds no samples");
  result.bits = result.total_bits / static_cast<double>(result.positions);
  return result;
}

template <typename T>
EvalResult evaluate_nll(const SequenceModel<T>& model, const std::vector<AudioSequence>& split, std::size_t L,
                        std::size_t rows) {
  std::vector<EncodedSequence> encoded;
  encoded.reserve(split.size());
  for (const auto& s : split) encoded.push_back(model.encode(s.samples));
  return evaluate_nll_encoded(model, encoded, L, rows);
}

SubsequenceStream::SubsequenceStream(std::vector<std::size_t> lengths, std::size_t rows, std::size_t L,
                                     std::uint64_t seed)
    : lengths_(std::move(lengths)), L_(L), rng_(seed), rows_(rows) {
  for (std::size_t i = 0; i < lengths_.size(); ++i) {
    if (lengths_[i] >= L_) order_.push_back(i);
  }
  if (order_.empty()) {
    throw DataError("no training sequence holds a full subsequence of " + std::to_string(L_) + " samples");
  }
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
}

std::size_t SubsequenceStream::draw() {
  if (next_ == order_.size()) {
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    next_ = 0;
    ++epoch_;
  }
  return order_[next_++];
}

std::vector<SubsequenceStream::Slot> SubsequenceStream::next() {
  std::vector<Slot> out(rows_.size());
  for (std::size_t b = 0; b < rows_.size(); ++b) {
    Row& row = rows_[b];
    bool reset = false;
    if (!row.active || row.offset + L_ > lengths_[row.sequence]) {
      row = {true, draw(), 0};
      reset = true;
    }
    out[b] = {row.sequence, row.offset, reset};
    row.offset += L_;
  }
  return out;
}

std::string SubsequenceStream::serialize() const {
  std::ostringstream os;
  os << epoch_ << ';' << next_ << ';';
  for (std::size_t i = 0; i < order_.size(); ++i) os << (i ? "," : "") << order_[i];
  os << ';';
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    os << (i ? "," : "") << (rows_[i].active ? 1 : 0) << ':' << rows_[i].sequence << ':' << rows_[i].offset;
  }
  os << ';' << rng_.state();
  return os.str();
}

void SubsequenceStream::deserialize(const std::string& text) {
  const auto parts = split(text, ';');
  if (parts.size() != 5) throw CheckpointError(CheckpointErrorKind::kMetadata, "malformed data stream state");
  try {
    const std::string key = "progress.stream";
    epoch_ = parse_count(key, parts[0]);
    next_ = parse_count(key, parts[1]);
    std::vector<std::size_t> order;
    if (!parts[2].empty()) order = parse_list(key, parts[2]);
    const auto rows = split(parts[3], ',');
    if (rows.size() != rows_.size()) {
      throw ConfigError("train.batch_size", "differs from the checkpoint (" + std::to_string(rows.size()) + ")");
    }
    if (order.size() != order_.size() || next_ > order.size()) {
      throw CheckpointError(CheckpointErrorKind::kMetadata, "data stream state does not match the corpus");
    }
    for (const auto i : order) {
      if (i >= lengths_.size()) throw CheckpointError(CheckpointErrorKind::kMetadata, "data stream index out of range");
    }
    std::vector<Row> restored(rows.size());
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const auto f = split(rows[b], ':');
      if (f.size() != 3) throw CheckpointError(CheckpointErrorKind::kMetadata, "malformed data stream row");
      restored[b] = {parse_count(key, f[0]) != 0, parse_count(key, f[1]), parse_count(key, f[2])};
      if (restored[b].active && restored[b].sequence >= lengths_.size()) {
        throw CheckpointError(CheckpointErrorKind::kMetadata, "data stream row out of range");
      }
    }
    order_ = std::move(order);
    rows_ = std::move(restored);
    rng_.set_state(parts[4]);
  } catch (const DataError& e) {
    throw CheckpointError(CheckpointErrorKind::kMetadata, e.what());
  }
}

std::string format_metrics_row(const MetricsRow& row) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f", row.step, row.train_bits, row.valid_bits);
  return buf;
}

template <typename T>
void write_model(Checkpoint& ckpt, const SequenceModel<T>& model) {
  ckpt.set("dtype", dtype_name<T>());
  for (const auto& [k, v] : model.config().entries()) ckpt.set(k, v);
  for (const auto& p : model.parameters()) ckpt.add(p.name, p.tensor);
}

template <typename T>
std::unique_ptr<SequenceModel<T>> read_model(const Checkpoint& ckpt) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : ckpt.metadata) {
    if (k.rfind("model.", 0) == 0) kv[k] = v;
  }
  if (kv.empty()) throw CheckpointError(CheckpointErrorKind::kMetadata, "checkpoint carries no model configuration");
  auto model = make_model<T>(ModelConfig::from_entries(kv), 0);
  for (auto& p : model->parameters()) ckpt.restore(p.name, p.tensor);
  return model;
}

template <typename T>
Trainer<T>::Trainer(ModelConfig model_cfg, TrainConfig cfg, const Corpus& corpus)
    : model_cfg_(std::move(model_cfg)), cfg_(cfg) {
  model_cfg_.validate();
  cfg_.validate(model_cfg_);
  if (model_cfg_.continuous() && model_cfg_.norm.mean == 0.0 && model_cfg_.norm.std == 1.0) {
    std::vector<std::vector<double>> samples;
    for (const auto& s : corpus.train) samples.push_back(s.samples);
    model_cfg_.norm = compute_norm_stats(samples);
  }
  model_ = make_model<T>(model_cfg_, cfg_.seed);
  setup(corpus);
}

template <typename T>
Trainer<T>::Trainer(const Checkpoint& ckpt, const Corpus& corpus, std::optional<TrainConfig> cfg) {
  std::map<std::string, std::string> kv(ckpt.metadata.begin(), ckpt.metadata.end());
  model_ = read_model<T>(ckpt);
  model_cfg_ = model_->config();
  cfg_ = cfg ? *cfg : TrainConfig::from_entries(kv);
  cfg_.validate(model_cfg_);
  setup(corpus);

  const std::string key = "progress";
  step_ = parse_count(key, ckpt.get("progress.step"));
  window_bits_ = parse_real(key, ckpt.get("progress.window_bits"));
  window_steps_ = parse_count(key, ckpt.get("progress.window_steps"));
  has_best_ = parse_bool(key, ckpt.get("progress.has_best"));
  best_valid_ = parse_real(key, ckpt.get("progress.best_valid"));
  best_step_ = parse_count(key, ckpt.get("progress.best_step"));
  stale_evals_ = parse_count(key, ckpt.get("progress.stale_evals"));
  stream_.deserialize(ckpt.get("progress.stream"));

  const auto params = model_->parameters();
  optim_.t = parse_u64(key, ckpt.get("progress.optim_t"));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = ckpt.tensor(params[i].name + ".adam_m");
    const auto& v = ckpt.tensor(params[i].name + ".adam_v");
    if (m.values.size() != params[i].tensor.size() || v.values.size() != params[i].tensor.size()) {
      throw CheckpointError(CheckpointErrorKind::kShapeMismatch, "optimiser moments of '" + params[i].name +
                                                                     "' do not match the parameter");
    }
    optim_.m[i] = m.values;
    optim_.v[i] = v.values;
  }

  const std::string fresh = ckpt.get("progress.fresh");
  if (fresh.size() != state_.rows) throw ConfigError("train.batch_size", "differs from the checkpoint");
  for (std::size_t b = 0; b < fresh.size(); ++b) state_.fresh[b] = fresh[b] == '1';
  for (std::size_t l = 0; l < state_.layers.size(); ++l) {
    auto restore = [&](const std::string& name, std::vector<T>& dst) {
      const CheckpointTensor* t = ckpt.find(name);
      dst.clear();
      if (t) {
        for (const double x : t->values) dst.push_back(static_cast<T>(x));
      }
    };
    restore("progress.state" + std::to_string(l) + ".h", state_.layers[l].h);
    restore("progress.state" + std::to_string(l) + ".c", state_.layers[l].c);
  }
}

template <typename T>
void Trainer<T>::setup(const Corpus& corpus) {
  if (corpus.train.empty()) throw DataError("training split is empty");
  if (corpus.valid.empty()) throw DataError("validation split is empty");
  train_.clear();
  valid_.clear();
  std::vector<std::size_t> lengths;
  for (const auto& s : corpus.train) {
    train_.push_back(model_->encode(s.samples));
    lengths.push_back(s.size());
  }
  const std::size_t n_valid = cfg_.eval_sequences == 0 ? corpus.valid.size()
                                                       : std::min(cfg_.eval_sequences, corpus.valid.size());
  for (std::size_t i = 0; i < n_valid; ++i) valid_.push_back(model_->encode(corpus.valid[i].samples));
  stream_ = SubsequenceStream(std::move(lengths), cfg_.batch_size, cfg_.subseq_len, Rng::mix(cfg_.seed, 1));
  state_ = model_->initial_state(cfg_.batch_size);
  optim_.reset(sizes_of(model_->parameters()));
  batch_ = make_batch<T>(cfg_.batch_size, cfg_.subseq_len, model_->history());
}

template <typename T>
StepResult Trainer<T>::step() {
  const auto slots = stream_.next();
  const int silence = model_cfg_.quantizer().silence_bin();
  const T silence_input = static_cast<T>(model_->silence_input());
  for (std::size_t b = 0; b < slots.size(); ++b) {
    if (slots[b].reset) state_.reset_row(b);
    fill_batch_row(batch_, b, train_[slots[b].sequence], slots[b].offset, silence, silence_input);
  }
  const StepResult r = tbptt_step(*model_, batch_, state_, optim_, cfg_);
  ++step_;
  window_bits_ += r.bits;
  ++window_steps_;
  return r;
}

template <typename T>
EvalResult Trainer<T>::validate() const {
  return evaluate_nll_encoded(*model_, valid_, cfg_.effective_eval_length(), cfg_.batch_size);
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  Checkpoint ck;
  write_model(ck, *model_);
  for (const auto& [k, v] : cfg_.entries()) ck.set(k, v);
  ck.set("progress.step", std::to_string(step_));
  ck.set("progress.optim_t", std::to_string(optim_.t));
  ck.set("progress.window_bits", format_exact(window_bits_));
  ck.set("progress.window_steps", std::to_string(window_steps_));
  ck.set("progress.has_best", has_best_ ? "true" : "false");
  ck.set("progress.best_valid", format_exact(best_valid_));
  ck.set("progress.best_step", std::to_string(best_step_));
  ck.set("progress.stale_evals", std::to_string(stale_evals_));
  ck.set("progress.stream", stream_.serialize());
  std::string fresh;
  for (const bool f : state_.fresh) fresh += f ? '1' : '0';
  ck.set("progress.fresh", fresh);

  const auto params = model_->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.add(params[i].name + ".adam_m", DType::kFloat64, params[i].tensor.shape(), std::span<const double>(optim_.m[i]));
    ck.add(params[i].name + ".adam_v", DType::kFloat64, params[i].tensor.shape(), std::span<const double>(optim_.v[i]));
  }
  for (std::size_t l = 0; l < state_.layers.size(); ++l) {
    const auto& layer = state_.layers[l];
    const std::string base = "progress.state" + std::to_string(l);
    if (!layer.h.empty()) ck.add(base + ".h", kDTypeOf<T>, Shape{layer.h.size()}, std::span<const T>(layer.h));
    if (!layer.c.empty()) ck.add(base + ".c", kDTypeOf<T>, Shape{layer.c.size()}, std::span<const T>(layer.c));
  }
  return ck;
}

template <typename T>
void Trainer<T>::save(const std::filesystem::path& path) const {
  save_checkpoint(path, checkpoint());
}

template <typename T>
TrainSummary Trainer<T>::run(const std::filesystem::path& out_dir, std::ostream* progress) {
  TrainSummary summary;
  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const auto path = out_dir / "metrics.tsv";
    std::vector<std::string> kept;
    if (step_ > 0) {
      // resume: drop rows logged after the checkpoint was taken
      std::ifstream in(path);
      std::string line;
      while (std::getline(in, line)) {
        const auto tab = line.find('\t');
        if (tab == std::string::npos) continue;
        if (parse_count("metrics.tsv", line.substr(0, tab)) <= step_) kept.push_back(line);
      }
    }
    log.open(path, std::ios::trunc);
    if (!log) throw DataError("cannot write " + path.string());
    for (const auto& line : kept) log << line << '\n';
    log.flush();
  }

  while (step_ < cfg_.max_steps) {
    step();
    if (!out_dir.empty() && cfg_.checkpoint_every && step_ % cfg_.checkpoint_every == 0) {
      save(out_dir / ("step_" + std::to_string(step_) + ".ckpt"));
    }
    if (step_ % cfg_.eval_every != 0 && step_ != cfg_.max_steps) continue;

    MetricsRow row;
    row.step = step_;
    row.train_bits = window_steps_ ? window_bits_ / static_cast<double>(window_steps_) : 0.0;
    row.valid_bits = validate().bits;
    window_bits_ = 0.0;
    window_steps_ = 0;
    summary.metrics.push_back(row);
    const bool improved = !has_best_ || row.valid_bits < best_valid_;
    if (improved) {
      has_best_ = true;
      best_valid_ = row.valid_bits;
      best_step_ = step_;
      stale_evals_ = 0;
    } else {
      ++stale_evals_;
    }
    if (log.is_open()) {
      log << format_metrics_row(row) << '\n';
      log.flush();
    }
    if (progress) *progress << format_metrics_row(row) << (improved ? "\t*" : "") << std::endl;
    if (!out_dir.empty()) {
      if (improved) save(out_dir / "best.ckpt");
      save(out_dir / "last.ckpt");
    }
    if (cfg_.patience && stale_evals_ >= cfg_.patience) {
      summary.early_stopped = true;
      break;
    }
  }
  summary.steps = step_;
  summary.best_valid = best_valid_;
  summary.best_step = best_step_;
  return summary;
}

template <typename T>
double train_variant(Variant variant, ModelConfig model_cfg, const TrainConfig& cfg, const Corpus& corpus,
                     TrainSummary* summary) {
  model_cfg.variant = variant;
  if (variant == Variant::kGmm) model_cfg.norm = {};
  Trainer<T> trainer(std::move(model_cfg), cfg, corpus);
  TrainSummary s = trainer.run();
  if (summary) *summary = s;
  return s.best_valid;
}

#define SAMPLERNN_INSTANTIATE(T)                                                                                      \
  template Batch<T> make_batch<T>(std::size_t, std::size_t, std::size_t);                                            \
  template void fill_batch_row<T>(Batch<T>&, std::size_t, const EncodedSequence&, std::size_t, int, T);             \
  template void adam_update<T>(ParameterList<T>&, OptimState&, const TrainConfig&);                                  \
  template StepResult tbptt_step<T>(SequenceModel<T>&, const Batch<T>&, ModelState<T>&, OptimState&,                \
                                    const TrainConfig&);                                                             \
  template EvalResult evaluate_nll<T>(const SequenceModel<T>&, const std::vector<AudioSequence>&, std::size_t,      \
                                      std::size_t);                                                                  \
  template EvalResult evaluate_nll_encoded<T>(const SequenceModel<T>&, const std::vector<EncodedSequence>&,         \
                                              std::size_t, std::size_t);                                             \
  template void write_model<T>(Checkpoint&, const SequenceModel<T>&);                                                \
  template std::unique_ptr<SequenceModel<T>> read_model<T>(const Checkpoint&);                                       \
  template class Trainer<T>;                                                                                         \
  template double train_variant<T>(Variant, ModelConfig, const TrainConfig&, const Corpus&, TrainSummary*);

SAMPLERNN_INSTANTIATE(float)
SAMPLERNN_INSTANTIATE(double)

#undef SAMPLERNN_INSTANTIATE

}  // namespace samplernn
