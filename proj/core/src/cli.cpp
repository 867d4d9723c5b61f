#include "samplernn/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "samplernn/checkpoint.hpp"
#include "samplernn/errors.hpp"
#include "samplernn/gradcheck.hpp"
#include "samplernn/parse.hpp"

namespace samplernn {

namespace {

std::string fmt(const char* spec, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

std::pair<std::string, std::string> split_assignment(const std::string& text, const std::string& origin) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError(origin, "expected key=value, got '" + text + "'");
  return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

std::size_t seconds_to_samples(double seconds, const std::string& field) {
  if (!(seconds >= 0.0) || !std::isfinite(seconds)) throw ConfigError(field, "must be a non-negative number of seconds");
  return static_cast<std::size_t>(std::llround(seconds * kSampleRate));
}

/// Calls `fn` with the checkpoint's model at its stored precision.
template <typename Fn>
int with_model(const Checkpoint& ckpt, Fn&& fn) {
  if (ckpt.has("dtype") && ckpt.get("dtype") == "f64") return fn(read_model<double>(ckpt));
  return fn(read_model<float>(ckpt));
}

}  // namespace

void DataConfig::set(const std::string& key, const std::string& value) {
  if (key == "data.manifest") {
    manifest = value;
  } else if (key == "data.wav_dir") {
    wav_dir = value;
  } else if (key == "data.chunk_seconds") {
    chunk_seconds = parse_real(key, value);
  } else if (key == "data.synth" || key == "data.kind") {
    synth = value;
  } else if (key == "data.sequences") {
    sequences = parse_count(key, value);
  } else if (key == "data.seconds") {
    seconds = parse_real(key, value);
  } else if (key == "data.f0") {
    f0 = parse_real(key, value);
  } else if (key == "data.amplitude") {
    amplitude = parse_real(key, value);
  } else if (key == "data.chain") {
    chain = value;
  } else if (key == "data.levels") {
    levels = parse_count(key, value);
  } else if (key == "data.f0_a") {
    f0_a = parse_real(key, value);
  } else if (key == "data.f0_b") {
    f0_b = parse_real(key, value);
  } else if (key == "data.train_fraction") {
    fractions.train = parse_real(key, value);
  } else if (key == "data.valid_fraction") {
    fractions.valid = parse_real(key, value);
  } else if (key == "data.test_fraction") {
    fractions.test = parse_real(key, value);
  } else if (key == "data.seed") {
    seed = parse_u64(key, value);
  } else {
    throw ConfigError(key, "unknown key");
  }
}

void DataConfig::validate() const {
  const int sources = !manifest.empty() + !wav_dir.empty() + !synth.empty();
  if (sources != 1) throw ConfigError("data", "set exactly one of data.manifest, data.wav_dir and data.synth");
  split_counts(0, fractions);
  if (!wav_dir.empty() && !(chunk_seconds > 0.0)) throw ConfigError("data.chunk_seconds", "must be positive");
  if (synth.empty()) return;
  if (synth != "sine" && synth != "markov" && synth != "two-speaker") {
    throw ConfigError("data.synth", "expected sine, markov or two-speaker, got '" + synth + "'");
  }
  if (sequences == 0) throw ConfigError("data.sequences", "must be at least 1");
  if (!(seconds > 0.0)) throw ConfigError("data.seconds", "must be positive");
  if (synth == "sine") {
    if (!(f0 > 0.0 && f0 < kSampleRate / 2.0)) throw ConfigError("data.f0", "must lie in (0, Nyquist)");
    if (!(amplitude >= 0.0 && amplitude <= 1.0)) throw ConfigError("data.amplitude", "must lie in [0, 1]");
  }
  if (synth == "markov") markov_chain().validate();
}

MarkovChain DataConfig::markov_chain(int q) const {
  if (chain == "uniform") return MarkovChain::uniform(levels, q);
  if (chain == "cycle") return MarkovChain::cycle(levels, q);
  MarkovChain m;
  std::stringstream rows(chain);
  std::string row;
  while (std::getline(rows, row, ';')) {
    std::vector<double> probs;
    std::stringstream cells(row);
    std::string cell;
    while (std::getline(cells, cell, ',')) probs.push_back(parse_real("data.chain", trim(cell)));
    m.transition.push_back(std::move(probs));
  }
  if (m.transition.empty()) throw ConfigError("data.chain", "expected uniform, cycle or rows 'p,p;p,p'");
  m.level_bins = MarkovChain::spread_bins(m.transition.size(), q);
  return m;
}

Corpus DataConfig::load(std::vector<std::string>* warnings) const {
  validate();
  if (!manifest.empty()) return load_manifest_corpus(manifest);
  if (!wav_dir.empty()) {
    std::vector<std::filesystem::path> paths;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(wav_dir, ec)) {
      std::string ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (entry.is_regular_file() && ext == ".wav") paths.push_back(entry.path());
    }
    if (ec) throw DataError("cannot list " + wav_dir + ": " + ec.message());
    if (paths.empty()) throw DataError("no .wav files in " + wav_dir);
    std::sort(paths.begin(), paths.end());
    std::vector<AudioSequence> files;
    for (const auto& p : paths) {
      files.push_back(read_wav(p));
      files.back().source = p.filename().string();
    }
    return chunk_corpus(files, chunk_seconds, fractions, seed, warnings);
  }
  if (synth == "two-speaker") {
    TwoSpeakerSpec spec;
    spec.f0_a = f0_a;
    spec.f0_b = f0_b;
    spec.sequences = sequences;
    spec.seconds = seconds;
    spec.seed = seed;
    Corpus c = synth_two_speaker(spec, fractions);
    c.metadata["kind"] = synth;
    return c;
  }
  std::vector<AudioSequence> items;
  std::map<std::string, std::string> meta{{"kind", synth}};
  if (synth == "sine") {
    for (std::size_t i = 0; i < sequences; ++i) {
      Rng rng(Rng::mix(seed, i));
      items.push_back(synth_sine(f0, seconds, amplitude, rng));
      items.back().source = "sine_" + std::to_string(i);
    }
    meta["f0"] = fmt("%.3f", f0);
  } else {
    const MarkovChain m = markov_chain();
    const std::size_t n = seconds_to_samples(seconds, "data.seconds");
    for (std::size_t i = 0; i < sequences; ++i) {
      items.push_back(synth_markov(m, n, Rng::mix(seed, i)));
      items.back().source = "markov_" + std::to_string(i);
    }
    meta["entropy_rate_bits"] = fmt("%.6f", m.entropy_rate());
    meta["levels"] = std::to_string(m.level_bins.size());
  }
  Corpus c = split_corpus(std::move(items), fractions);
  c.metadata = std::move(meta);
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key.rfind("model.", 0) == 0) {
    model.set(key, value);
  } else if (key.rfind("train.", 0) == 0) {
    train.set(key, value);
  } else if (key.rfind("data.", 0) == 0) {
    data.set(key, value);
  } else if (key == "out") {
    out = value;
  } else if (key == "seed") {
    train.seed = data.seed = parse_u64(key, value);
  } else if (key == "precision") {
    if (value == "f32" || value == "float32") {
      precision = Precision::kFloat32;
    } else if (value == "f64" || value == "float64") {
      precision = Precision::kFloat64;
    } else {
      throw ConfigError(key, "expected f32 or f64, got '" + value + "'");
    }
  } else {
    throw ConfigError(key, "unknown key");
  }
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    auto kv = split_assignment(line, where);
    if (kv.first.empty()) throw ConfigError(where, "missing key");
    entries.push_back(std::move(kv));
  }
  // the top-level seed is a default, so explicit train/data seeds win
  for (const auto& [k, v] : entries) {
    if (k == "seed") cfg.set(k, v);
  }
  const bool tiers_given = std::any_of(entries.begin(), entries.end(), [](const auto& e) { return e.first == "model.tiers"; });
  const bool frames_given =
      std::any_of(entries.begin(), entries.end(), [](const auto& e) { return e.first == "model.frame_sizes"; });
  for (const auto& [k, v] : entries) {
    if (k == "model.tiers") cfg.set(k, v);
  }
  for (const auto& [k, v] : entries) {
    if (k != "seed" && k != "model.tiers") cfg.set(k, v);
  }
  if (tiers_given && frames_given) {
    const auto it = std::find_if(entries.begin(), entries.end(), [](const auto& e) { return e.first == "model.tiers"; });
    if (parse_count(it->first, it->second) != cfg.model.tiers()) {
      throw ConfigError("model.tiers", "disagrees with the length of model.frame_sizes");
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::validate() const {
  model.validate();
  train.validate(model);
  data.validate();
  if (out.empty()) throw ConfigError("out", "output directory must not be empty");
}

double ProbeReport::percent() const {
  return classified == 0 ? 0.0 : 100.0 * static_cast<double>(consistent) / static_cast<double>(classified);
}

std::pair<double, double> binomial_interval95(std::size_t n, double p) {
  if (n == 0) return {0.0, 1.0};
  std::vector<double> pmf(n + 1);
  for (std::size_t k = 0; k <= n; ++k) {
    const double dk = static_cast<double>(k), dn = static_cast<double>(n);
    pmf[k] = std::exp(std::lgamma(dn + 1) - std::lgamma(dk + 1) - std::lgamma(dn - dk + 1) + dk * std::log(p) +
                      (dn - dk) * std::log1p(-p));
  }
  double cdf = 0.0;
  std::size_t lo = n, hi = n;
  bool lo_set = false;
  for (std::size_t k = 0; k <= n; ++k) {
    cdf += pmf[k];
    if (!lo_set && cdf >= 0.025) {
      lo = k;
      lo_set = true;
    }
    if (cdf >= 0.975) {
      hi = k;
      break;
    }
  }
  return {static_cast<double>(lo) / static_cast<double>(n), static_cast<double>(hi) / static_cast<double>(n)};
}

std::size_t worker_threads(std::size_t requested) {
  std::size_t n = requested ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SAMPLERNN_THREADS")) {
    const std::size_t cap = parse_count("SAMPLERNN_THREADS", env);
    if (cap > 0) n = std::min(n, cap);
  }
  return std::max<std::size_t>(1, n);
}

template <typename T>
ProbeReport run_probe(const SequenceModel<T>& model, const ProbeOptions& o) {
  if (o.runs == 0) throw ConfigError("--runs", "must be at least 1");
  const std::size_t total = seconds_to_samples(o.seconds, "--seconds");
  const std::size_t window = seconds_to_samples(o.window, "--window");
  const std::size_t silence_start = seconds_to_samples(o.silence_at, "--silence-at");
  const std::size_t silence_len = seconds_to_samples(o.silence_len, "--silence-len");
  if (window == 0 || 2 * window > total) throw ConfigError("--window", "head and tail windows must fit the generation");

  ProbeReport report;
  report.runs.resize(o.runs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < o.runs; i = next++) {
      ProbeRun& run = report.runs[i];
      run.index = i;
      run.seed = Rng::mix(o.seed, i);
      GenerateOptions g;
      g.samples = total;
      g.seed = run.seed;
      g.temperature = o.temperature;
      if (silence_len > 0) g.silence = SilenceWindow{silence_start, silence_len};
      const GenerationResult out = model.generate(g);
      const std::span<const double> audio(out.amplitudes);
      run.f0_first = estimate_f0(audio.subspan(0, window));
      run.f0_last = estimate_f0(audio.subspan(total - window, window));
      if (run.f0_first) run.class_first = classify_speaker(*run.f0_first, o.f0_a, o.f0_b);
      if (run.f0_last) run.class_last = classify_speaker(*run.f0_last, o.f0_a, o.f0_b);
    }
  };
  const std::size_t threads = std::min(worker_threads(o.threads), o.runs);
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (std::size_t t = 0; t + 1 < threads; ++t) {
    pool.emplace_back([&] {
      try {
        worker();
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = o.runs;
      }
    });
  }
  try {
    worker();
  } catch (...) {
    std::lock_guard lock(failure_mutex);
    if (!failure) failure = std::current_exception();
    next = o.runs;
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  for (const auto& r : report.runs) {
    report.classified += r.classified();
    report.consistent += r.consistent();
  }
  return report;
}

template ProbeReport run_probe<float>(const SequenceModel<float>&, const ProbeOptions&);
template ProbeReport run_probe<double>(const SequenceModel<double>&, const ProbeOptions&);

int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckFailed;
  }
}

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  RunConfig cfg = RunConfig::load(args.config);
  for (const auto& o : args.overrides) {
    const auto [k, v] = split_assignment(o, "--set");
    cfg.set(k, v);
  }
  if (args.out) cfg.out = *args.out;
  if (args.seed) cfg.train.seed = *args.seed;
  if (args.max_steps) cfg.train.max_steps = *args.max_steps;
  cfg.validate();

  std::vector<std::string> warnings;
  const Corpus corpus = cfg.data.load(&warnings);
  for (const auto& w : warnings) err << "warning: " << w << '\n';
  const std::filesystem::path dir(cfg.out);

  auto train = [&]<typename T>(std::unique_ptr<Trainer<T>> trainer) {
    out << "parameters\t" << trainer->model().parameter_count() << '\n';
    if (trainer->step_count() > 0) out << "resumed\t" << trainer->step_count() << '\n';
    const TrainSummary s = trainer->run(dir, &out);
    out << "best_valid\t" << fmt("%.6f", s.best_valid) << "\tstep\t" << s.best_step << '\n';
    if (s.early_stopped) out << "early_stopped\t" << s.steps << '\n';
    return kExitOk;
  };
  if (args.resume) {
    const Checkpoint ckpt = load_checkpoint(dir / "last.ckpt");
    if (ckpt.has("dtype") && ckpt.get("dtype") == "f64") {
      return train(std::make_unique<Trainer<double>>(ckpt, corpus, cfg.train));
    }
    return train(std::make_unique<Trainer<float>>(ckpt, corpus, cfg.train));
  }
  if (cfg.precision == Precision::kFloat64) return train(std::make_unique<Trainer<double>>(cfg.model, cfg.train, corpus));
  return train(std::make_unique<Trainer<float>>(cfg.model, cfg.train, corpus));
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  const Checkpoint ckpt = load_checkpoint(args.ckpt);
  Corpus corpus;
  std::vector<std::string> warnings;
  if (!args.manifest.empty()) {
    corpus = load_manifest_corpus(args.manifest);
  } else if (!args.config.empty()) {
    const RunConfig cfg = RunConfig::load(args.config);
    corpus = cfg.data.load(&warnings);
    const std::string ckpt_q = ckpt.get("model.q");
    if (std::to_string(cfg.model.q) != ckpt_q) {
      throw ConfigError("model.q", "config uses q=" + std::to_string(cfg.model.q) + ", the checkpoint q=" + ckpt_q);
    }
  } else {
    throw ConfigError("--config", "eval needs a corpus from --config or --manifest");
  }
  for (const auto& w : warnings) err << "warning: " << w << '\n';
  const auto& split = corpus.split(args.split);
  if (split.empty()) throw DataError("split '" + args.split + "' is empty");

  return with_model(ckpt, [&](auto model) {
    std::size_t length = args.length;
    if (length == 0 && ckpt.has("train.eval_length")) length = parse_count("train.eval_length", ckpt.get("train.eval_length"));
    if (length == 0 && ckpt.has("train.subseq_len")) length = parse_count("train.subseq_len", ckpt.get("train.subseq_len"));
    if (length == 0) length = 512 / model->length_multiple() * model->length_multiple();
    const EvalResult r = evaluate_nll(*model, split, length);
    out << fmt("%.6f", r.bits) << '\n';
    for (std::size_t i = 0; i < split.size(); ++i) {
      out << "sequence\t" << i << '\t' << split[i].source << '\t' << split[i].size() << '\t'
          << fmt("%.6f", r.per_sequence[i]) << '\n';
    }
    return kExitOk;
  });
}

int cmd_generate(const GenerateArgs& args, std::ostream& out, std::ostream&) {
  if (args.out.empty()) throw ConfigError("--out", "an output WAV path is required");
  const Checkpoint ckpt = load_checkpoint(args.ckpt);
  GenerateOptions g;
  g.samples = seconds_to_samples(args.seconds, "--seconds");
  if (g.samples == 0) throw ConfigError("--seconds", "must produce at least one sample");
  g.seed = args.seed;
  if (!(args.temperature > 0.0)) throw ConfigError("--temperature", "must be positive");
  g.temperature = args.temperature;
  if (args.silence_at) {
    g.silence = SilenceWindow{seconds_to_samples(*args.silence_at, "--silence-at"),
                              seconds_to_samples(args.silence_len, "--silence-len")};
  }
  return with_model(ckpt, [&](auto model) {
    const GenerationResult r = model->generate(g);
    AudioSequence seq;
    seq.samples = r.amplitudes;
    seq.source = args.out;
    write_wav(args.out, seq);
    out << "wrote\t" << args.out << '\t' << seq.size() << " samples\n";
    return kExitOk;
  });
}

int cmd_probe(const ProbeArgs& args, std::ostream& out, std::ostream&) {
  const Checkpoint ckpt = load_checkpoint(args.ckpt);
  return with_model(ckpt, [&](auto model) {
    const ProbeReport report = run_probe(*model, args.options);
    std::ostringstream table;
    table << "run\tseed\tf0_first\tf0_last\tclass_first\tclass_last\tsame\n";
    auto hz = [](const std::optional<double>& f) { return f ? fmt("%.2f", *f) : std::string("unvoiced"); };
    auto cls = [](int c) { return c < 0 ? std::string("-") : std::string(c == 0 ? "a" : "b"); };
    for (const auto& r : report.runs) {
      table << r.index << '\t' << r.seed << '\t' << hz(r.f0_first) << '\t' << hz(r.f0_last) << '\t'
            << cls(r.class_first) << '\t' << cls(r.class_last) << '\t'
            << (r.classified() ? (r.consistent() ? "yes" : "no") : "excluded") << '\n';
    }
    out << table.str();
    if (!args.table.empty()) {
      std::ofstream f(args.table, std::ios::trunc);
      if (!f) throw DataError("cannot write " + args.table);
      f << table.str();
    }
    if (report.inconclusive()) {
      out << "inconclusive\tevery run was unvoiced\n";
      return kExitInconclusive;
    }
    const auto [lo, hi] = binomial_interval95(report.classified);
    out << "consistency\t" << fmt("%.1f", report.percent()) << "%\t" << report.consistent << '/' << report.classified
        << '\n';
    out << "chance_interval95\t" << fmt("%.1f", 100 * lo) << "%\t" << fmt("%.1f", 100 * hi) << "%\n";
    return kExitOk;
  });
}

int cmd_make_synth(const MakeSynthArgs& args, std::ostream& out, std::ostream&) {
  if (args.out.empty()) throw ConfigError("--out", "an output directory is required");
  DataConfig data;
  if (!args.config.empty()) data = RunConfig::load(args.config).data;
  data.manifest.clear();
  data.wav_dir.clear();
  data.synth = args.kind;
  for (const auto& o : args.overrides) {
    auto [k, v] = split_assignment(o, "--set");
    if (k.rfind("data.", 0) != 0) k = "data." + k;
    data.set(k, v);
  }
  if (args.seed) data.seed = *args.seed;
  const Corpus corpus = data.load();

  const std::filesystem::path dir(args.out);
  std::filesystem::create_directories(dir);
  Manifest manifest;
  manifest.metadata = corpus.metadata;
  manifest.metadata["kind"] = data.synth;
  manifest.metadata["seed"] = std::to_string(data.seed);
  std::size_t counts[2] = {0, 0};
  for (const char* name : {"train", "valid", "test"}) {
    const auto& split = corpus.split(name);
    for (std::size_t i = 0; i < split.size(); ++i) {
      char file[64];
      std::snprintf(file, sizeof file, "%s_%03zu.wav", name, i);
      write_wav(dir / file, split[i]);
      manifest.records.push_back({name, file, 0, split[i].size()});
      if (split[i].label >= 0) {
        manifest.metadata[std::string("label.") + file] = std::to_string(split[i].label);
        ++counts[split[i].label == 0 ? 0 : 1];
      }
    }
  }
  write_manifest(dir / "manifest.tsv", manifest);
  out << "wrote\t" << (dir / "manifest.tsv").string() << '\t' << manifest.records.size() << " files\n";
  out << "splits\t" << corpus.train.size() << '\t' << corpus.valid.size() << '\t' << corpus.test.size() << '\n';
  if (const auto it = corpus.metadata.find("entropy_rate_bits"); it != corpus.metadata.end()) {
    out << "entropy_rate_bits\t" << it->second << '\n';
  }
  if (data.synth == "two-speaker") out << "speakers\t" << counts[0] << '\t' << counts[1] << '\n';
  return kExitOk;
}

int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out, std::ostream&) {
  GradcheckOptions o;
  o.instances = args.instances;
  o.seed = args.seed;
  o.tanh_fault = args.tanh_fault;
  o.only = args.cases;
  const GradcheckReport report = run_gradcheck(o);
  out << "case\tinstances\tchecks\tmax_rel_error\tworst\tstatus\n";
  for (const auto& c : report.cases) {
    out << c.name << '\t' << c.instances << '\t' << c.checks << '\t' << fmt("%.3e", c.max_rel_error) << '\t' << c.worst
        << '\t' << (c.passed ? "ok" : "FAIL") << '\n';
  }
  const GradcheckCase& worst = report.worst();
  out << "worst\t" << worst.name << '\t' << worst.worst << '\t' << fmt("%.3e", worst.max_rel_error) << '\n';
  out << (report.passed() ? "PASS" : "FAIL") << '\t' << fmt("%.1f", report.seconds) << " s\n";
  return report.passed() ? kExitOk : kExitCheckFailed;
}

}  // namespace samplernn
