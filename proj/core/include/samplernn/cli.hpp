#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "samplernn/audio.hpp"
#include "samplernn/model.hpp"
#include "samplernn/trainer.hpp"

namespace samplernn {

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitInconclusive = 4,
};

/// Corpus source of a run: a manifest, a WAV directory or a synthetic kind.
struct DataConfig {
  std::string manifest;
  std::string wav_dir;
  double chunk_seconds = 8.0;
  std::string synth;  // sine | markov | two-speaker
  std::size_t sequences = 16;
  double seconds = 4.0;
  double f0 = 440.0;
  double amplitude = 0.5;
  std::string chain = "uniform";  // uniform | cycle | rows "p,p;p,p"
  std::size_t levels = 4;
  double f0_a = 125.3;
  double f0_b = 201.8;
  SplitFractions fractions;
  std::uint64_t seed = 0;

  void set(const std::string& key, const std::string& value);
  void validate() const;
  MarkovChain markov_chain(int q = 256) const;
  /// Reads or synthesises the corpus; warnings (skipped files) are appended.
  Corpus load(std::vector<std::string>* warnings = nullptr) const;
};

enum class Precision { kFloat32, kFloat64 };

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string out = "run";
  Precision precision = Precision::kFloat32;

  /// Flat `key = value` lines, `#` comments, model.* / train.* / data.*
  /// sections plus `out`, `seed` and `precision`. A top-level seed applies
  /// to train.seed and data.seed unless those are given.
  static RunConfig parse(const std::string& text, const std::string& origin = "config");
  static RunConfig load(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value);
  void validate() const;
};

struct TrainArgs {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_steps;
  bool resume = false;  // continue from <out>/last.ckpt
  std::vector<std::string> overrides;  // key=value
};

struct EvalArgs {
  std::string ckpt;
  std::string config;    // data section supplies the corpus
  std::string manifest;  // alternative corpus source
  std::string split = "test";
  std::size_t length = 0;  // 0: the checkpoint's eval length
};

struct GenerateArgs {
  std::string ckpt;
  std::string out;
  double seconds = 1.0;
  std::uint64_t seed = 0;
  std::optional<double> silence_at;  // seconds
  double silence_len = 1.0;
  double temperature = 1.0;
};

struct ProbeOptions {
  std::size_t runs = 50;
  std::uint64_t seed = 0;
  double seconds = 5.0;
  double silence_at = 2.0;
  double silence_len = 1.0;
  double window = 2.0;  // classified head and tail, seconds
  double f0_a = 125.3;
  double f0_b = 201.8;
  double temperature = 1.0;
  std::size_t threads = 0;  // 0: SAMPLERNN_THREADS or the hardware count
};

struct ProbeRun {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::optional<double> f0_first, f0_last;
  int class_first = -1, class_last = -1;

  bool classified() const { return f0_first.has_value() && f0_last.has_value(); }
  bool consistent() const { return classified() && class_first == class_last; }
};

struct ProbeReport {
  std::vector<ProbeRun> runs;
  std::size_t classified = 0;
  std::size_t consistent = 0;

  bool inconclusive() const { return classified == 0; }
  double percent() const;
};

/// Central 95% acceptance interval, as fractions, of Binomial(n, p) / n.
std::pair<double, double> binomial_interval95(std::size_t n, double p = 0.5);

/// Worker count from SAMPLERNN_THREADS, capped by `requested` when nonzero.
std::size_t worker_threads(std::size_t requested = 0);

template <typename T>
ProbeReport run_probe(const SequenceModel<T>& model, const ProbeOptions& options);

struct ProbeArgs {
  std::string ckpt;
  ProbeOptions options;
  std::string table;  // optional TSV of per-run results
};

struct MakeSynthArgs {
  std::string kind;  // sine | markov | two-speaker
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string config;  // optional; its data.* keys apply
  std::vector<std::string> overrides;  // data.key=value
};

struct GradcheckArgs {
  std::size_t instances = 100;
  std::uint64_t seed = 0;
  bool tanh_fault = false;
  std::vector<std::string> cases;
};

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err);
int cmd_generate(const GenerateArgs& args, std::ostream& out, std::ostream& err);
int cmd_probe(const ProbeArgs& args, std::ostream& out, std::ostream& err);
int cmd_make_synth(const MakeSynthArgs& args, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out, std::ostream& err);

/// Runs a command body and maps escaping errors to exit codes: config and
/// checkpoint errors 2, data errors 3, anything else 1.
int guarded(const std::function<int()>& body, std::ostream& err);

}  // namespace samplernn
