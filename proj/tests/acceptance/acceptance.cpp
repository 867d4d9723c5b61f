// Acceptance suite: `samplernn_acceptance [N...]` runs the listed criteria
// (all when none are given) and prints one PASS/FAIL line per criterion.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include "samplernn/checkpoint.hpp"
#include "samplernn/cli.hpp"
#include "samplernn/gradcheck.hpp"
#include "samplernn/quantizer.hpp"
#include "samplernn/sample_rnn.hpp"
#include "samplernn/trainer.hpp"
#include "support.hpp"

using namespace samplernn;
using namespace samplernn::testing;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* spec, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

void log(const std::string& line) {
  std::fprintf(stderr, "  %s\n", line.c_str());
  std::fflush(stderr);
}

ModelConfig two_tier(std::size_t hidden) {
  ModelConfig cfg;
  cfg.frame_sizes = {2, 8};
  cfg.hidden = hidden;
  return cfg;
}

/// Trains with the stock recipe and returns the final validation NLL.
double train_and_validate(const ModelConfig& model, const TrainConfig& train, const Corpus& corpus,
                          double* train_bits = nullptr) {
  Trainer<float> trainer(model, train, corpus);
  const auto t0 = Clock::now();
  for (std::size_t s = 0; s < train.max_steps; ++s) {
    const StepResult r = trainer.step();
    if ((s + 1) % train.eval_every == 0) {
      log("step " + std::to_string(s + 1) + " train " + fmt("%.4f", r.bits) + " bits, " + fmt("%.0f", since(t0)) + " s");
    }
  }
  const double valid = trainer.validate().bits;
  if (train_bits) {
    std::vector<AudioSequence> train_split = corpus.train;
    *train_bits = evaluate_nll(trainer.model(), train_split, train.effective_eval_length()).bits;
  }
  return valid;
}

// 1 ---------------------------------------------------------------------------
Outcome gradient_correctness() {
  const GradcheckReport report = run_gradcheck();
  const GradcheckCase& worst = report.worst();
  for (const auto& c : report.cases) log(c.name + " " + fmt("%.2e", c.max_rel_error));
  return {report.passed() && worst.max_rel_error < 1e-4 && report.seconds < 120.0,
          "worst " + worst.name + " " + fmt("%.2e", worst.max_rel_error) + " in " + fmt("%.1f", report.seconds) + " s"};
}

// 2 ---------------------------------------------------------------------------
Outcome uniform_baseline() {
  const Corpus markov = markov_corpus(MarkovChain::uniform(4), 10, 1000, 1);
  std::vector<AudioSequence> mixed = markov.valid;
  AudioSequence n;
  n.samples = noise(777, 2, 0.9);
  mixed.push_back(n);

  std::vector<ModelConfig> configs;
  configs.push_back(ModelConfig{});
  configs.push_back(two_tier(32));
  for (auto v : {Variant::kNoEmbedding, Variant::kMultiSoftmax}) {
    ModelConfig c;
    c.variant = v;
    configs.push_back(c);
  }
  ModelConfig lstm;
  lstm.cell = CellKind::kLstm;
  configs.push_back(lstm);
  ModelConfig baseline;
  baseline.arch = Architecture::kBaseline;
  configs.push_back(baseline);

  double worst = 0.0;
  for (const auto& cfg : configs) {
    for (std::uint64_t seed : {1u, 2u}) {
      const auto f = make_model<float>(cfg, seed);
      const auto d = make_model<double>(cfg, seed);
      worst = std::max(worst, std::abs(evaluate_nll(*f, mixed, 64).bits - 8.0));
      worst = std::max(worst, std::abs(evaluate_nll(*d, mixed, 64).bits - 8.0));
    }
  }
  return {worst <= 1e-9, "max |bits - 8| = " + fmt("%.3e", worst)};
}

// 3 ---------------------------------------------------------------------------
TrainConfig markov_recipe(std::uint64_t seed) {
  TrainConfig t;
  t.subseq_len = 128;
  t.batch_size = 16;
  t.max_steps = 5000;
  t.eval_every = 500;
  t.seed = seed;
  return t;
}

Outcome entropy_rate_convergence() {
  bool pass = true;
  std::string detail;
  for (const auto& [name, chain, bound] :
       {std::tuple{"uniform-4", MarkovChain::uniform(4), 2.0 + 0.05}, std::tuple{"cycle-4", MarkovChain::cycle(4), 0.05}}) {
    const auto t0 = Clock::now();
    const Corpus c = markov_corpus(chain, 40, 8000, 3);
    const double bits = train_and_validate(two_tier(64), markov_recipe(1), c);
    const double secs = since(t0);
    const bool ok = (std::string(name) == "cycle-4" ? bits < bound : bits <= bound) && secs < 900.0;
    pass = pass && ok;
    detail += std::string(detail.empty() ? "" : "; ") + name + " " + fmt("%.4f", bits) + " bits (H*=" +
              fmt("%.3f", chain.entropy_rate()) + ") in " + fmt("%.0f", secs) + " s";
  }
  return {pass, detail};
}

// 4 ---------------------------------------------------------------------------
Outcome memorization() {
  Rng rng(4);
  AudioSequence clip = synth_speaker_sequence(160.0, 2.0, rng);
  clip.source = "clip";
  Corpus c;
  c.train = {clip};
  c.valid = {clip};
  TrainConfig t;
  t.subseq_len = 256;
  t.batch_size = 8;
  t.max_steps = 10000;
  t.eval_every = 1000;
  t.seed = 4;
  const auto t0 = Clock::now();
  double train_bits = 0.0;
  train_and_validate(two_tier(128), t, c, &train_bits);
  const double secs = since(t0);
  return {train_bits < 1.0 && secs < 1200.0, "training NLL " + fmt("%.4f", train_bits) + " bits in " + fmt("%.0f", secs) + " s"};
}

// 5 ---------------------------------------------------------------------------
Outcome perforated_upsampling() {
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t H = 1 + rng.below(24), r = 1 + rng.below(8), steps = 1 + rng.below(6);
    ModelConfig cfg;
    cfg.frame_sizes = {1, r};
    cfg.hidden = H;
    Rng init(Rng::mix(5, static_cast<std::uint64_t>(trial)));
    SampleRnn<double> model(cfg, init);
    for (auto& up : model.tier(2).upsample) {
      for (auto& g : up.scale().mutable_values()) g = 0.5 + rng.uniform();
      for (auto& b : up.bias().mutable_values()) b = rng.normal();
    }
    const Tensor<double> hs = random_tensor<double>({steps, H}, rng);
    const auto cs = model.upsample(2, hs);

    // zero-stuff by r, then a causal convolution whose taps are the r maps
    std::vector<double> stuffed(steps * r * H, 0.0);
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t d = 0; d < H; ++d) stuffed[(t * r) * H + d] = hs[t * H + d];
    }
    std::vector<Tensor<double>> taps;
    for (const auto& up : model.tier(2).upsample) taps.push_back(up.weight());
    for (std::size_t n = 0; n < steps * r; ++n) {
      for (std::size_t o = 0; o < H; ++o) {
        double acc = model.tier(2).upsample[n % r].bias()[o];
        for (std::size_t j = 0; j < r && j <= n; ++j) {
          for (std::size_t d = 0; d < H; ++d) acc += taps[j][o * H + d] * stuffed[(n - j) * H + d];
        }
        worst = std::max(worst, std::abs(cs[n % r][(n / r) * H + o] - acc));
      }
    }
  }
  return {worst <= 1e-12, "max abs difference " + fmt("%.3e", worst) + " over 100 instances"};
}

// 6 ---------------------------------------------------------------------------
Outcome split_invariance() {
  auto model = make_model<float>(ModelConfig{}, 6);
  jitter(*model, 7, 0.1);
  std::vector<AudioSequence> seqs(2);
  seqs[0].samples = noise(4096, 8, 0.4);
  Rng rng(9);
  seqs[1] = synth_speaker_sequence(130.0, 0.256, rng);
  const double full = evaluate_nll(*model, seqs, 4096, 1).bits;
  double worst = 0.0;
  std::string detail = "full " + fmt("%.6f", full);
  for (std::size_t L : {32, 64, 128, 512}) {
    const double bits = evaluate_nll(*model, seqs, L, 1).bits;
    worst = std::max(worst, std::abs(bits - full) / full);
    detail += ", L=" + std::to_string(L) + " " + fmt("%.6f", bits);
  }
  return {worst <= 1e-6, detail + "; max rel " + fmt("%.2e", worst)};
}

// 7 ---------------------------------------------------------------------------
/// Segments of 200 samples: a key of four random levels held for 8 samples
/// each, silence, and the same key repeated in the last 32 samples. Only a
/// memory spanning the segment predicts the repeat.
Corpus echo_corpus(std::size_t sequences, std::size_t segments, std::uint64_t seed) {
  const auto bins = MarkovChain::spread_bins(4);
  std::vector<AudioSequence> items;
  for (std::size_t i = 0; i < sequences; ++i) {
    Rng rng(Rng::mix(seed, i));
    AudioSequence s;
    s.source = "echo_" + std::to_string(i);
    for (std::size_t g = 0; g < segments; ++g) {
      std::vector<double> key(4);
      for (auto& k : key) k = dequantize(bins[rng.below(4)]);
      std::vector<double> seg(200, 0.0);
      for (std::size_t j = 0; j < 32; ++j) seg[j] = seg[168 + j] = key[j / 8];
      s.samples.insert(s.samples.end(), seg.begin(), seg.end());
    }
    items.push_back(std::move(s));
  }
  return split_corpus(std::move(items), {0.8, 0.2, 0.0});
}

Outcome subsequence_length_trend() {
  const auto t0 = Clock::now();
  const Corpus c = echo_corpus(40, 40, 7);
  ModelConfig cfg;
  cfg.frame_sizes = {2, 2, 8};
  cfg.hidden = 64;
  double mean[2] = {0.0, 0.0};
  const std::size_t lengths[2] = {32, 256};
  std::string detail;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (int i = 0; i < 2; ++i) {
      TrainConfig t;
      t.subseq_len = lengths[i];
      t.batch_size = 16;
      t.max_steps = 4096 / lengths[i] * 150;  // same number of predicted samples
      t.eval_every = t.max_steps / 4;
      t.eval_length = 256;
      t.seed = seed;
      const double bits = train_and_validate(cfg, t, c);
      log("L=" + std::to_string(lengths[i]) + " seed " + std::to_string(seed) + ": " + fmt("%.4f", bits));
      mean[i] += bits / 3.0;
    }
  }
  const double secs = since(t0);
  return {mean[1] < mean[0] && secs < 2700.0, "mean NLL L=32 " + fmt("%.4f", mean[0]) + ", L=256 " + fmt("%.4f", mean[1]) +
                                                   " in " + fmt("%.0f", secs) + " s"};
}

// 8 ---------------------------------------------------------------------------
/// Eight levels with a fixed sparse transition matrix; consecutive samples
/// are strongly dependent, so frame-independent heads lose information.
MarkovChain ablation_chain() {
  const std::size_t n = 8;
  MarkovChain m{MarkovChain::spread_bins(n), std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0))};
  const std::size_t jumps[8][2] = {{3, 6}, {5, 2}, {7, 4}, {1, 6}, {0, 3}, {2, 7}, {4, 1}, {6, 5}};
  for (std::size_t s = 0; s < n; ++s) {
    m.transition[s][jumps[s][0]] = 0.75;
    m.transition[s][jumps[s][1]] = 0.25;
  }
  return m;
}

Outcome ablation_direction() {
  const auto t0 = Clock::now();
  const Corpus c = markov_corpus(ablation_chain(), 40, 4096, 8);
  const Variant variants[3] = {Variant::kDefault, Variant::kNoEmbedding, Variant::kMultiSoftmax};
  double mean[3] = {0, 0, 0};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (int v = 0; v < 3; ++v) {
      ModelConfig cfg = two_tier(64);
      cfg.variant = variants[v];
      TrainConfig t = markov_recipe(seed);
      t.max_steps = 1500;
      const double bits = train_variant<float>(variants[v], cfg, t, c);
      log(to_string(variants[v]) + " seed " + std::to_string(seed) + ": " + fmt("%.4f", bits));
      mean[v] += bits / 3.0;
    }
  }
  const bool a = mean[0] <= mean[1];
  const bool b = mean[0] + 0.02 <= mean[2];
  return {a && b, "H*=" + fmt("%.4f", ablation_chain().entropy_rate()) + "; default " + fmt("%.4f", mean[0]) +
                      ", no_embedding " + fmt("%.4f", mean[1]) + ", multisoftmax " + fmt("%.4f", mean[2]) + " in " +
                      fmt("%.0f", since(t0)) + " s"};
}

// 9 ---------------------------------------------------------------------------
/// Agreement rate two independent draws from the observed head and tail
/// class frequencies would reach; a speaker-biased model scores above 50%
/// without any memory.
double chance_agreement(const ProbeReport& r) {
  double head = 0.0, tail = 0.0;
  for (const auto& run : r.runs) {
    if (!run.classified()) continue;
    head += run.class_first == 0;
    tail += run.class_last == 0;
  }
  if (r.classified == 0) return 0.0;
  const double n = static_cast<double>(r.classified);
  return head / n * tail / n + (1 - head / n) * (1 - tail / n);
}

Outcome memory_probe() {
  const auto t0 = Clock::now();
  TwoSpeakerSpec spec;
  spec.sequences = 40;
  spec.seconds = 4.0;
  spec.seed = 9;
  const Corpus c = synth_two_speaker(spec, {0.9, 0.1, 0.0});
  ModelConfig cfg;
  cfg.frame_sizes = {2, 2, 8};
  cfg.hidden = 128;
  TrainConfig t;
  t.subseq_len = 512;
  t.batch_size = 16;
  t.max_steps = 6000;
  t.eval_every = 1000;
  t.seed = 9;
  Trainer<float> trainer(cfg, t, c);
  trainer.run();
  log("trained in " + fmt("%.0f", since(t0)) + " s, valid " + fmt("%.4f", trainer.validate().bits));

  ProbeOptions o;
  o.runs = 50;
  o.seed = 9;
  const ProbeReport trained = run_probe(trainer.model(), o);
  const auto untrained_model = make_model<float>(cfg, 10);
  const ProbeReport untrained = run_probe(*untrained_model, o);
  const auto [lo, hi] = binomial_interval95(untrained.classified);
  const double control = untrained.classified ? static_cast<double>(untrained.consistent) / untrained.classified : 0.0;
  const double secs = since(t0);
  // a single-speaker model agrees with itself by construction
  const double chance = 100.0 * chance_agreement(trained);
  const bool pass = !trained.inconclusive() && trained.percent() >= 65.0 && trained.percent() - chance >= 15.0 &&
                    !untrained.inconclusive() && control >= lo && control <= hi && secs < 5400.0;
  return {pass, "trained " + fmt("%.1f", trained.percent()) + "% (" + std::to_string(trained.consistent) + "/" +
                    std::to_string(trained.classified) + ", chance from class frequencies " + fmt("%.1f", chance) +
                    "%), untrained " + fmt("%.1f", 100 * control) + "% within [" + fmt("%.1f", 100 * lo) + ", " +
                    fmt("%.1f", 100 * hi) + "] in " + fmt("%.0f", secs) + " s"};
}

// 10 --------------------------------------------------------------------------
Outcome determinism_and_resume() {
  const Corpus c = markov_corpus(MarkovChain::uniform(4), 12, 2048, 10);
  ModelConfig cfg = two_tier(32);
  TrainConfig t;
  t.subseq_len = 128;
  t.batch_size = 8;
  t.max_steps = 120;
  t.eval_every = 30;
  t.seed = 10;
  TempDir a, b, part;
  Trainer<float>(cfg, t, c).run(a.path());
  Trainer<float>(cfg, t, c).run(b.path());
  const bool train_same = read_bytes(a / "metrics.tsv") == read_bytes(b / "metrics.tsv") &&
                          read_bytes(a / "last.ckpt") == read_bytes(b / "last.ckpt") &&
                          read_bytes(a / "best.ckpt") == read_bytes(b / "best.ckpt");

  TrainConfig half = t;
  half.max_steps = 60;
  Trainer<float>(cfg, half, c).run(part.path());
  Trainer<float> resumed(load_checkpoint(part / "last.ckpt"), c, t);
  resumed.run(part.path());
  const bool resume_same = read_bytes(a / "metrics.tsv") == read_bytes(part / "metrics.tsv") &&
                           read_bytes(a / "last.ckpt") == read_bytes(part / "last.ckpt");

  const auto model = read_model<float>(load_checkpoint(a / "last.ckpt"));
  GenerateOptions g;
  g.samples = 8000;
  g.seed = 3;
  g.silence = SilenceWindow{2000, 1000};
  AudioSequence x, y;
  x.samples = model->generate(g).amplitudes;
  y.samples = model->generate(g).amplitudes;
  write_wav(a / "x.wav", x);
  write_wav(a / "y.wav", y);
  const bool generate_same = read_bytes(a / "x.wav") == read_bytes(a / "y.wav");
  return {train_same && resume_same && generate_same,
          std::string("train ") + (train_same ? "identical" : "differs") + ", resume " +
              (resume_same ? "identical" : "differs") + ", generate " + (generate_same ? "identical" : "differs")};
}

// 11 --------------------------------------------------------------------------
Outcome quantizer_exhaustive() {
  const auto t0 = Clock::now();
  bool ok = true;
  for (int q : {2, 4, 16, 256}) {
    const QuantizerConfig cfg{q};
    for (int b = 0; b < q; ++b) ok = ok && quantize(dequantize(b, cfg), cfg) == b;
  }
  // every PCM16 amplitude is a dense grid over [-1, 1)
  int prev = -1;
  double worst = 0.0;
  for (int s = -32768; s <= 32767; ++s) {
    const double x = pcm16_to_amplitude(static_cast<std::int16_t>(s));
    ok = ok && amplitude_to_pcm16(x) == s;
    const int b = quantize(x);
    ok = ok && b >= prev;
    prev = b;
    worst = std::max(worst, std::abs(dequantize(b) - x));
  }
  ok = ok && quantize(1.0) == 255 && worst <= 1.0 / 256;
  const double secs = since(t0);
  return {ok && secs < 5.0, "max reconstruction error " + fmt("%.6f", worst) + " in " + fmt("%.3f", secs) + " s"};
}

// 12 --------------------------------------------------------------------------
Outcome generation_throughput() {
  const auto model = make_model<float>(two_tier(128), 12);
  jitter(*model, 13, 0.05);
  GenerateOptions g;
  g.samples = 2000;
  g.seed = 1;
  model->generate(g);  // warm-up
  g.samples = 48000;
  const auto t0 = Clock::now();
  const auto r = model->generate(g);
  const double rate = static_cast<double>(r.amplitudes.size()) / since(t0);
  return {rate >= 2000.0, fmt("%.0f", rate) + " samples/s"};
}

const std::vector<std::pair<const char*, std::function<Outcome()>>> kCriteria = {
    {"gradient correctness", gradient_correctness},
    {"uniform baseline", uniform_baseline},
    {"entropy-rate convergence", entropy_rate_convergence},
    {"memorization", memorization},
    {"perforated upsampling", perforated_upsampling},
    {"stateful split invariance", split_invariance},
    {"subsequence-length trend", subsequence_length_trend},
    {"ablation direction", ablation_direction},
    {"memory-retention probe", memory_probe},
    {"determinism and persistence", determinism_and_resume},
    {"quantizer exhaustives", quantizer_exhaustive},
    {"generation throughput", generation_throughput},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::size_t> which;
  for (int i = 1; i < argc; ++i) {
    const long n = std::strtol(argv[i], nullptr, 10);
    if (n < 1 || n > static_cast<long>(kCriteria.size())) {
      std::fprintf(stderr, "usage: %s [criterion 1..%zu ...]\n", argv[0], kCriteria.size());
      return 2;
    }
    which.push_back(static_cast<std::size_t>(n));
  }
  if (which.empty()) {
    for (std::size_t n = 1; n <= kCriteria.size(); ++n) which.push_back(n);
  }
  int failures = 0;
  for (const std::size_t n : which) {
    const auto& [name, fn] = kCriteria[n - 1];
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("criterion %zu (%s): %s  %s  [%.1f s]\n", n, name, o.pass ? "PASS" : "FAIL", o.detail.c_str(), since(t0));
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
