#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "samplernn/quantizer.hpp"
#include "samplernn/rng.hpp"

namespace samplernn {

inline constexpr int kSampleRate = 16000;

struct AudioSequence {
  std::vector<double> samples;  // amplitudes in [-1, 1]
  int sample_rate = kSampleRate;
  std::string source;
  int label = -1;  // speaker index for the two-speaker corpus
  std::map<std::string, std::string> metadata;

  std::size_t size() const { return samples.size(); }
  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// RIFF/WAVE PCM16, mono or stereo (averaged), at `expected_rate`.
AudioSequence read_wav(const std::filesystem::path& path, int expected_rate = kSampleRate);
/// Mono PCM16 with a canonical 44-byte header.
void write_wav(const std::filesystem::path& path, const AudioSequence& seq);
AudioSequence parse_wav(const std::vector<std::uint8_t>& bytes, int expected_rate = kSampleRate,
                        const std::string& source = {});
std::vector<std::uint8_t> encode_wav(const AudioSequence& seq);

struct SplitFractions {
  double train = 0.86;
  double valid = 0.07;
  double test = 0.07;
};

struct Corpus {
  std::vector<AudioSequence> train, valid, test;
  SplitFractions fractions;
  std::map<std::string, std::string> metadata;

  const std::vector<AudioSequence>& split(const std::string& name) const;
};

/// Cuts every file into whole chunks of `seconds`, shuffles the chunks with
/// `seed` and assigns them to splits by rounded fractions. Files shorter than
/// one chunk are skipped and reported in `warnings`.
Corpus chunk_corpus(const std::vector<AudioSequence>& files, double seconds = 8.0, SplitFractions fractions = {},
                    std::uint64_t seed = 0, std::vector<std::string>* warnings = nullptr);

/// Assigns items to train/valid/test in order by split_counts.
Corpus split_corpus(std::vector<AudioSequence> items, SplitFractions fractions = {});

/// Split counts for n chunks: round(n * train), round(n * valid), rest.
std::array<std::size_t, 3> split_counts(std::size_t n, const SplitFractions& fractions);

struct ManifestRecord {
  std::string split;
  std::string path;
  std::size_t offset = 0;
  std::size_t length = 0;
};

struct Manifest {
  std::vector<ManifestRecord> records;
  std::map<std::string, std::string> metadata;  // "# key=value" lines
};

void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);
/// Loads every record; relative paths resolve against the manifest directory.
Corpus load_manifest_corpus(const std::filesystem::path& path);

struct PaddedBatch {
  std::size_t rows = 0;
  std::size_t length = 0;
  std::vector<double> samples;  // [rows x length], padding is 0
  std::vector<float> mask;      // [rows x length]
};

/// Pads with silence to the longest row rounded up to a multiple of `multiple`.
PaddedBatch pad_and_mask(const std::vector<std::vector<double>>& rows, std::size_t multiple);

AudioSequence synth_sine(double f0, double seconds, double amplitude, Rng& rng, int rate = kSampleRate);

/// First-order chain over a few amplitude levels, each tied to its own bin.
struct MarkovChain {
  std::vector<int> level_bins;
  std::vector<std::vector<double>> transition;

  void validate(int q = 256) const;
  std::vector<double> stationary() const;
  /// -sum_s pi_s sum_s' P(s,s') log2 P(s,s').
  double entropy_rate() const;

  static MarkovChain uniform(std::size_t levels, int q = 256);
  static MarkovChain cycle(std::size_t levels, int q = 256);
  /// Levels spread evenly over the bin range, centred in their quarter-bands.
  static std::vector<int> spread_bins(std::size_t levels, int q = 256);
};

/// `length` samples at the dequantised level bins, starting from the
/// stationary distribution. metadata["entropy_rate_bits"] holds the rate.
AudioSequence synth_markov(const MarkovChain& chain, std::size_t length, std::uint64_t seed, int q = 256);

struct TwoSpeakerSpec {
  double f0_a = 125.3;
  double f0_b = 201.8;
  std::size_t sequences = 40;
  double seconds = 4.0;
  std::uint64_t seed = 0;
  int rate = kSampleRate;
};

/// Harmonic pseudo-voiced segments separated by pauses, one speaker per
/// sequence, balanced by count. Labels: 0 = speaker a, 1 = speaker b.
Corpus synth_two_speaker(const TwoSpeakerSpec& spec, SplitFractions fractions = {});
AudioSequence synth_speaker_sequence(double f0, double seconds, Rng& rng, int rate = kSampleRate);

struct PitchRange {
  double min_hz = 16000.0 / 150.0;
  double max_hz = 320.0;
};

/// Autocorrelation pitch estimate; nullopt for flat (unvoiced) windows.
std::optional<double> estimate_f0(std::span<const double> window, int rate = kSampleRate, PitchRange range = {});

/// 0 for speaker a, 1 for speaker b, split at the geometric midpoint.
int classify_speaker(double f0, double f0_a = 125.3, double f0_b = 201.8);

}  // namespace samplernn
