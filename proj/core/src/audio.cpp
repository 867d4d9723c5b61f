#include "samplernn/audio.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "samplernn/errors.hpp"

namespace samplernn {

namespace {

std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

}  // namespace

AudioSequence parse_wav(const std::vector<std::uint8_t>& bytes, int expected_rate, const std::string& source) {
  const auto malformed = [&](const std::string& why) {
    return WavError(WavErrorKind::kMalformedHeader, "wav " + source + ": " + why);
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw malformed("missing RIFF/WAVE signature");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0;
  std::uint32_t rate = 0;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* hdr = bytes.data() + pos;
    const std::uint32_t size = read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (size < 16 || body + size > bytes.size()) throw malformed("truncated fmt chunk");
      const std::uint8_t* f = bytes.data() + body;
      std::uint16_t format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      bits = read_u16(f + 14);
      if (format == kFormatExtensible) {
        if (size < 40) throw malformed("truncated extensible fmt chunk");
        format = read_u16(f + 24);
      }
      if (format != kFormatPcm) {
        throw WavError(WavErrorKind::kUnsupportedCodec, "wav " + source + ": codec " + std::to_string(format) +
                                                            " is not PCM");
      }
      if (bits != 16) {
        throw WavError(WavErrorKind::kUnsupportedBitDepth, "wav " + source + ": " + std::to_string(bits) +
                                                               "-bit samples, expected 16");
      }
      if (channels != 1 && channels != 2) {
        throw WavError(WavErrorKind::kUnsupportedChannels, "wav " + source + ": " + std::to_string(channels) +
                                                               " channels");
      }
      if (static_cast<int>(rate) != expected_rate) {
        throw WavError(WavErrorKind::kUnsupportedRate, "wav " + source + ": " + std::to_string(rate) +
                                                           " Hz, expected " + std::to_string(expected_rate));
      }
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      if (!have_fmt) throw malformed("data chunk before fmt chunk");
      if (body + size > bytes.size()) throw malformed("data chunk runs past end of file");
      const std::size_t frame = 2u * channels;
      if (size % frame != 0) throw malformed("data chunk is not a whole number of frames");
      AudioSequence seq;
      seq.sample_rate = static_cast<int>(rate);
      seq.source = source;
      const std::size_t n = size / frame;
      seq.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
          const auto s = static_cast<std::int16_t>(read_u16(bytes.data() + body + i * frame + 2 * c));
          acc += pcm16_to_amplitude(s);
        }
        seq.samples[i] = acc / channels;
      }
      return seq;
    }
    pos = body + size + (size & 1u);
  }
  throw malformed(have_fmt ? "no data chunk" : "no fmt chunk");
}

AudioSequence read_wav(const std::filesystem::path& path, int expected_rate) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WavError(WavErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_wav(bytes, expected_rate, path.string());
}

std::vector<std::uint8_t> encode_wav(const AudioSequence& seq) {
  const auto data_bytes = static_cast<std::uint32_t>(seq.samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, kFormatPcm);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(seq.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(seq.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  put_tag(out, "data");
  put_u32(out, data_bytes);
  for (const double x : seq.samples) put_u16(out, static_cast<std::uint16_t>(amplitude_to_pcm16(x)));
  return out;
}

void write_wav(const std::filesystem::path& path, const AudioSequence& seq) {
  const auto bytes = encode_wav(seq);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WavError(WavErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WavError(WavErrorKind::kIo, "short write to " + path.string());
}

const std::vector<AudioSequence>& Corpus::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  throw ConfigError("split", "expected train, valid or test, got '" + name + "'");
}

std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& f) {
  const double total = f.train + f.valid + f.test;
  if (f.train < 0 || f.valid < 0 || f.test < 0 || std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("data.fractions", "split fractions must be non-negative and sum to 1");
  }
  const auto train = std::min(n, static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n))));
  const auto valid = std::min(n - train, static_cast<std::size_t>(std::llround(f.valid * static_cast<double>(n))));
  return {train, valid, n - train - valid};
}

namespace {

template <typename Item>
void shuffle(std::vector<Item>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
}

}  // namespace

Corpus split_corpus(std::vector<AudioSequence> items, SplitFractions fractions) {
  Corpus corpus;
  corpus.fractions = fractions;
  const auto counts = split_counts(items.size(), fractions);
  auto it = std::make_move_iterator(items.begin());
  corpus.train.assign(it, it + static_cast<std::ptrdiff_t>(counts[0]));
  it += static_cast<std::ptrdiff_t>(counts[0]);
  corpus.valid.assign(it, it + static_cast<std::ptrdiff_t>(counts[1]));
  it += static_cast<std::ptrdiff_t>(counts[1]);
  corpus.test.assign(it, std::make_move_iterator(items.end()));
  return corpus;
}

Corpus chunk_corpus(const std::vector<AudioSequence>& files, double seconds, SplitFractions fractions,
                    std::uint64_t seed, std::vector<std::string>* warnings) {
  if (files.empty()) throw DataError("chunk_corpus: no input files");
  if (!(seconds > 0.0)) throw ConfigError("data.chunk_seconds", "must be positive");
  std::vector<AudioSequence> chunks;
  for (const auto& file : files) {
    const auto chunk = static_cast<std::size_t>(std::llround(seconds * file.sample_rate));
    const std::size_t count = file.samples.size() / chunk;
    if (count == 0) {
      if (warnings) warnings->push_back("skipping " + file.source + ": shorter than one " + std::to_string(seconds) + " s chunk");
      continue;
    }
    for (std::size_t c = 0; c < count; ++c) {
      AudioSequence s;
      s.sample_rate = file.sample_rate;
      s.label = file.label;
      s.source = file.source;
      s.metadata["offset"] = std::to_string(c * chunk);
      s.samples.assign(file.samples.begin() + static_cast<std::ptrdiff_t>(c * chunk),
                       file.samples.begin() + static_cast<std::ptrdiff_t>((c + 1) * chunk));
      chunks.push_back(std::move(s));
    }
  }
  Rng rng(seed);
  shuffle(chunks, rng);
  return split_corpus(std::move(chunks), fractions);
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& [key, value] : manifest.metadata) out << "# " << key << '=' << value << '\n';
  for (const auto& r : manifest.records) out << r.split << '\t' << r.path << '\t' << r.offset << '\t' << r.length << '\n';
  if (!out) throw DataError("short write to manifest " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos) {
        std::string key = line.substr(1, eq - 1);
        key.erase(0, key.find_first_not_of(' '));
        m.metadata[key] = line.substr(eq + 1);
      }
      continue;
    }
    std::istringstream fields(line);
    ManifestRecord r;
    std::string offset, length;
    if (!std::getline(fields, r.split, '\t') || !std::getline(fields, r.path, '\t') ||
        !std::getline(fields, offset, '\t') || !std::getline(fields, length)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected split<TAB>path<TAB>offset<TAB>length");
    }
    try {
      r.offset = std::stoull(offset);
      r.length = std::stoull(length);
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad offset or length");
    }
    if (r.split != "train" && r.split != "valid" && r.split != "test") {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": unknown split '" + r.split + "'");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

Corpus load_manifest_corpus(const std::filesystem::path& path) {
  const Manifest m = read_manifest(path);
  Corpus corpus;
  corpus.metadata = m.metadata;
  std::map<std::string, AudioSequence> cache;
  for (const auto& r : m.records) {
    std::filesystem::path file(r.path);
    if (file.is_relative()) file = path.parent_path() / file;
    auto it = cache.find(file.string());
    if (it == cache.end()) it = cache.emplace(file.string(), read_wav(file)).first;
    const AudioSequence& src = it->second;
    if (r.offset + r.length > src.samples.size()) {
      throw DataError("manifest record " + r.path + " [" + std::to_string(r.offset) + ", +" + std::to_string(r.length) +
                      ") runs past the end of the file");
    }
    AudioSequence s;
    s.sample_rate = src.sample_rate;
    s.source = r.path;
    s.samples.assign(src.samples.begin() + static_cast<std::ptrdiff_t>(r.offset),
                     src.samples.begin() + static_cast<std::ptrdiff_t>(r.offset + r.length));
    if (const auto lab = m.metadata.find("label." + r.path); lab != m.metadata.end()) s.label = std::stoi(lab->second);
    (r.split == "train" ? corpus.train : r.split == "valid" ? corpus.valid : corpus.test).push_back(std::move(s));
  }
  return corpus;
}

PaddedBatch pad_and_mask(const std::vector<std::vector<double>>& rows, std::size_t multiple) {
  if (rows.empty()) throw ContractError("pad_and_mask: empty batch");
  if (multiple == 0) throw ContractError("pad_and_mask: multiple must be positive");
  std::size_t longest = 0;
  for (const auto& r : rows) longest = std::max(longest, r.size());
  PaddedBatch out;
  out.rows = rows.size();
  out.length = (longest + multiple - 1) / multiple * multiple;
  out.samples.assign(out.rows * out.length, 0.0);
  out.mask.assign(out.rows * out.length, 0.0f);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    std::copy(rows[b].begin(), rows[b].end(), out.samples.begin() + static_cast<std::ptrdiff_t>(b * out.length));
    std::fill_n(out.mask.begin() + static_cast<std::ptrdiff_t>(b * out.length), rows[b].size(), 1.0f);
  }
  return out;
}

AudioSequence synth_sine(double f0, double seconds, double amplitude, Rng& rng, int rate) {
  if (!(f0 > 0.0) || f0 >= rate / 2.0) {
    throw ConfigError("data.f0", "frequency " + std::to_string(f0) + " Hz is outside (0, Nyquist)");
  }
  if (seconds < 0.0) throw ConfigError("data.seconds", "must be non-negative");
  const double phase = 2.0 * std::numbers::pi * rng.uniform();
  AudioSequence s;
  s.sample_rate = rate;
  s.source = "sine";
  s.samples.resize(static_cast<std::size_t>(std::llround(seconds * rate)));
  for (std::size_t t = 0; t < s.samples.size(); ++t) {
    s.samples[t] = amplitude * std::sin(2.0 * std::numbers::pi * f0 * static_cast<double>(t) / rate + phase);
  }
  return s;
}

void MarkovChain::validate(int q) const {
  const std::size_t n = level_bins.size();
  if (n == 0) throw ConfigError("data.markov", "no levels");
  if (transition.size() != n) throw ConfigError("data.markov", "transition matrix must be square over the levels");
  for (std::size_t i = 0; i < n; ++i) {
    if (level_bins[i] < 0 || level_bins[i] >= q) throw ConfigError("data.markov", "level bin out of range");
    for (std::size_t j = 0; j < i; ++j) {
      if (level_bins[i] == level_bins[j]) throw ConfigError("data.markov", "levels must map to distinct bins");
    }
    if (transition[i].size() != n) throw ConfigError("data.markov", "transition matrix must be square");
    double sum = 0.0;
    for (const double p : transition[i]) {
      if (!(p >= 0.0)) throw ConfigError("data.markov", "negative or NaN transition probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ConfigError("data.markov", "row " + std::to_string(i) + " sums to " + std::to_string(sum));
    }
  }
}

std::vector<double> MarkovChain::stationary() const {
  const auto n = static_cast<Eigen::Index>(level_bins.size());
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      a(i, j) = transition[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] - (i == j ? 1.0 : 0.0);
    }
  }
  a.row(n - 1).setOnes();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  rhs(n - 1) = 1.0;
  const Eigen::VectorXd pi = a.colPivHouseholderQr().solve(rhs);
  return {pi.data(), pi.data() + n};
}

double MarkovChain::entropy_rate() const {
  const auto pi = stationary();
  double h = 0.0;
  for (std::size_t s = 0; s < pi.size(); ++s) {
    for (const double p : transition[s]) {
      if (p > 0.0) h -= pi[s] * p * std::log2(p);
    }
  }
  return h;
}

std::vector<int> MarkovChain::spread_bins(std::size_t levels, int q) {
  std::vector<int> bins(levels);
  for (std::size_t i = 0; i < levels; ++i) {
    bins[i] = static_cast<int>((2 * i + 1) * static_cast<std::size_t>(q) / (2 * levels));
  }
  return bins;
}

MarkovChain MarkovChain::uniform(std::size_t levels, int q) {
  return {spread_bins(levels, q), std::vector<std::vector<double>>(levels, std::vector<double>(levels, 1.0 / levels))};
}

MarkovChain MarkovChain::cycle(std::size_t levels, int q) {
  MarkovChain m{spread_bins(levels, q), std::vector<std::vector<double>>(levels, std::vector<double>(levels, 0.0))};
  for (std::size_t i = 0; i < levels; ++i) m.transition[i][(i + 1) % levels] = 1.0;
  return m;
}

namespace {

std::size_t draw(std::span<const double> probs, Rng& rng) {
  double u = rng.uniform();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (u < probs[i]) return i;
    u -= probs[i];
  }
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return 0;
}

std::string fixed(double x, int digits) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(digits);
  out << x;
  return out.str();
}

}  // namespace

AudioSequence synth_markov(const MarkovChain& chain, std::size_t length, std::uint64_t seed, int q) {
  chain.validate(q);
  const QuantizerConfig qc{q};
  Rng rng(seed);
  const auto pi = chain.stationary();
  AudioSequence s;
  s.source = "markov";
  s.samples.resize(length);
  std::size_t state = draw(pi, rng);
  for (std::size_t t = 0; t < length; ++t) {
    s.samples[t] = dequantize(chain.level_bins[state], qc);
    state = draw(chain.transition[state], rng);
  }
  s.metadata["entropy_rate_bits"] = fixed(chain.entropy_rate(), 6);
  return s;
}

AudioSequence synth_speaker_sequence(double f0, double seconds, Rng& rng, int rate) {
  const auto n = static_cast<std::size_t>(std::llround(seconds * rate));
  AudioSequence s;
  s.sample_rate = rate;
  s.samples.assign(n, 0.0);
  std::size_t t = rng.uniform() < 0.5 ? static_cast<std::size_t>((0.05 + 0.25 * rng.uniform()) * rate) : 0;
  while (t < n) {
    const auto voiced = static_cast<std::size_t>((0.1 + 0.3 * rng.uniform()) * rate);
    const double f = f0 * (1.0 + 0.03 * (rng.uniform() - 0.5));
    const double gain = 0.35 + 0.15 * rng.uniform();
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    const auto ramp = static_cast<std::size_t>(0.02 * rate);
    const std::size_t end = std::min(n, t + voiced);
    double norm = 0.0;
    for (int k = 1; k * f < 4000.0; ++k) norm += 1.0 / k;
    for (std::size_t i = t; i < end; ++i) {
      const double tau = static_cast<double>(i - t) / rate;
      double v = 0.0;
      for (int k = 1; k * f < 4000.0; ++k) v += std::sin(2.0 * std::numbers::pi * k * f * tau + k * phase) / k;
      const std::size_t from_edge = std::min(i - t, t + voiced - 1 - i);
      const double env = from_edge < ramp ? 0.5 - 0.5 * std::cos(std::numbers::pi * from_edge / ramp) : 1.0;
      s.samples[i] = gain * env * v / norm * 2.0;
    }
    t = end + static_cast<std::size_t>((0.005 + 0.02 * rng.uniform()) * rate);
  }
  for (auto& x : s.samples) x = std::clamp(x, -1.0, 1.0);
  return s;
}

Corpus synth_two_speaker(const TwoSpeakerSpec& spec, SplitFractions fractions) {
  if (std::abs(spec.f0_a - spec.f0_b) <= 50.0) throw ConfigError("data.f0", "speaker fundamentals must differ by > 50 Hz");
  if (spec.sequences < 2 || spec.sequences % 2 != 0) throw ConfigError("data.sequences", "need an even count >= 2");
  std::vector<AudioSequence> items;
  for (std::size_t i = 0; i < spec.sequences; ++i) {
    Rng rng(Rng::mix(spec.seed, i));
    const int label = static_cast<int>(i % 2);
    AudioSequence s = synth_speaker_sequence(label == 0 ? spec.f0_a : spec.f0_b, spec.seconds, rng, spec.rate);
    s.label = label;
    s.source = std::string(label == 0 ? "speaker_a_" : "speaker_b_") + std::to_string(i / 2);
    items.push_back(std::move(s));
  }
  Corpus corpus = split_corpus(std::move(items), fractions);
  corpus.metadata["f0_a"] = fixed(spec.f0_a, 1);
  corpus.metadata["f0_b"] = fixed(spec.f0_b, 1);
  corpus.metadata["count.speaker_a"] = std::to_string(spec.sequences / 2);
  corpus.metadata["count.speaker_b"] = std::to_string(spec.sequences / 2);
  return corpus;
}

std::optional<double> estimate_f0(std::span<const double> window, int rate, PitchRange range) {
  if (!(range.min_hz > 0.0) || !(range.max_hz > range.min_hz)) throw ContractError("estimate_f0: bad pitch range");
  const auto lo = static_cast<std::size_t>(std::floor(rate / range.max_hz));
  const auto hi = static_cast<std::size_t>(std::ceil(rate / range.min_hz - 1e-9));
  const std::size_t n = window.size();
  if (n < 2 * hi + 2 || lo < 2) {
    throw ContractError("estimate_f0: window of " + std::to_string(n) + " samples is too short for lag " +
                        std::to_string(hi));
  }
  double mean = 0.0;
  for (const double x : window) mean += x;
  mean /= static_cast<double>(n);
  std::vector<double> x(n);
  double energy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = window[i] - mean;
    energy += x[i] * x[i];
  }
  if (std::sqrt(energy / static_cast<double>(n)) < 1e-3) return std::nullopt;

  // Prefix sums of squares give the energy of each overlap region.
  std::vector<double> sq(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) sq[i + 1] = sq[i] + x[i] * x[i];
  const auto corr = [&](std::size_t lag) {
    double acc = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) acc += x[i] * x[i + lag];
    const double e = std::sqrt(sq[n - lag] * (sq[n] - sq[lag]));
    return e > 0.0 ? acc / e : 0.0;
  };
  std::vector<double> r(hi + 2, 0.0);
  for (std::size_t lag = lo - 1; lag <= hi + 1; ++lag) r[lag] = corr(lag);
  std::size_t best = lo;
  for (std::size_t lag = lo; lag <= hi; ++lag) {
    if (r[lag] > r[best]) best = lag;
  }
  double offset = 0.0;
  const double denom = r[best - 1] - 2.0 * r[best] + r[best + 1];
  if (denom < 0.0) offset = std::clamp(0.5 * (r[best - 1] - r[best + 1]) / denom, -0.5, 0.5);
  return rate / (static_cast<double>(best) + offset);
}

int classify_speaker(double f0, double f0_a, double f0_b) {
  const double threshold = std::sqrt(f0_a * f0_b);
  const bool a_low = f0_a < f0_b;
  return (f0 < threshold) == a_low ? 0 : 1;
}

}  // namespace samplernn
