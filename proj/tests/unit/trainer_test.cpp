#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "samplernn/checkpoint.hpp"
#include "samplernn/errors.hpp"
#include "samplernn/init.hpp"
#include "samplernn/trainer.hpp"
#include "support.hpp"

using namespace samplernn;
using namespace samplernn::testing;

namespace {

TrainConfig quick_train(std::size_t L = 64, std::size_t steps = 20) {
  TrainConfig t;
  t.subseq_len = L;
  t.batch_size = 4;
  t.max_steps = steps;
  t.eval_every = 10;
  t.seed = 7;
  return t;
}

Corpus small_markov(std::uint64_t seed = 1) {
  return markov_corpus(MarkovChain::uniform(4), 10, 640, seed);
}

template <typename T>
std::vector<std::vector<double>> gradients(const ParameterList<T>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) {
    auto t = p.tensor;
    out.emplace_back(t.grad().begin(), t.grad().end());
  }
  return out;
}

template <typename T>
std::vector<std::vector<double>> values(const ParameterList<T>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

/// Loss and parameter gradients of one teacher-forced pass, no update.
template <typename T>
double loss_and_grads(SequenceModel<T>& model, const Batch<T>& batch, ModelState<T>& state) {
  for (auto& p : model.parameters()) p.tensor.zero_grad();
  Tape<T> tape;
  typename Tape<T>::Scope scope(tape);
  const Tensor<T> loss = model.loss(model.forward(batch, state), batch);
  tape.backward(loss);
  return loss.item();
}

}  // namespace

TEST(SplitSubsequences, TwoWindowsAndHistory) {
  const auto subs = split_subsequences(1024, 512, 16);
  ASSERT_EQ(subs.size(), 2u);
  EXPECT_EQ(subs[1].offset, 512u);
  std::vector<double> seq(1024);
  for (std::size_t i = 0; i < seq.size(); ++i) seq[i] = static_cast<double>(i);
  const auto hist = history_window(seq, subs[1], 16);
  ASSERT_EQ(hist.size(), 16u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(hist[i], 496.0 + i);
  const auto first = history_window(seq, subs[0], 16);
  for (double v : first) EXPECT_EQ(v, 0.0);
}

TEST(SplitSubsequences, ShortSequenceWarns) {
  std::vector<std::string> warnings;
  EXPECT_TRUE(split_subsequences(100, 512, 16, Remainder::kDrop, &warnings).empty());
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(SplitSubsequences, BadLengthIsConfigError) {
  try {
    split_subsequences(1000, 100, 16);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "train.subseq_len");
  }
}

TEST(SplitSubsequences, ConcatenationReconstructs) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t mult = std::size_t{1} << rng.below(4);
    const std::size_t L = mult * (1 + rng.below(8));
    const std::size_t n = rng.below(300);
    const auto drop = split_subsequences(n, L, mult, Remainder::kDrop);
    const auto pad = split_subsequences(n, L, mult, Remainder::kPad);
    std::size_t pos = 0;
    for (const auto& s : drop) {
      ASSERT_EQ(s.offset, pos);
      ASSERT_EQ(s.length, L);
      ASSERT_EQ(s.valid, L);
      pos += L;
    }
    ASSERT_EQ(pos, n / L * L);
    pos = 0;
    std::size_t valid = 0;
    for (const auto& s : pad) {
      ASSERT_EQ(s.offset, pos);
      pos += s.length;
      valid += s.valid;
    }
    ASSERT_EQ(valid, n);
    ASSERT_LT(pos - n, L + (n == 0 ? 1 : 0));
  }
}

TEST(TbpttStep, UniformInitIsEightBits) {
  ModelConfig cfg = tiny_config({2, 2, 8});
  auto model = make_model<float>(cfg, 2);
  const auto seq = model->encode(noise(64, 3));
  auto batch = row_batch(*model, seq, 0, 64);
  auto state = model->initial_state(1);
  OptimState optim;
  const StepResult r = tbptt_step(*model, batch, state, optim, quick_train());
  EXPECT_NEAR(r.bits, 8.0, 1e-6);
  EXPECT_TRUE(r.updated);
  EXPECT_EQ(optim.t, 1u);
}

TEST(TbpttStep, FullyMaskedBatchLeavesParameters) {
  auto model = make_model<float>(tiny_config({2, 2}), 4);
  const auto seq = model->encode(noise(32, 5));
  auto batch = row_batch(*model, seq, 0, 32);
  std::fill(batch.weights.begin(), batch.weights.end(), 0.0f);
  auto state = model->initial_state(1);
  OptimState optim;
  const auto before = values(model->parameters());
  const StepResult r = tbptt_step(*model, batch, state, optim, quick_train());
  EXPECT_FALSE(r.updated);
  EXPECT_EQ(values(model->parameters()), before);
  for (const auto& g : gradients(model->parameters())) {
    for (double v : g) EXPECT_EQ(v, 0.0);
  }
}

TEST(TbpttStep, MaskedPositionsContributeNothing) {
  auto model = make_model<double>(tiny_config({2, 2}), 6);
  jitter(*model, 7, 0.2);
  const auto seq = model->encode(noise(32, 8));
  auto a = row_batch(*model, seq, 0, 32);
  for (std::size_t j = 20; j < 32; ++j) a.weights[j] = 0.0;
  auto b = a;
  // masked targets past the last input the model reads
  b.bins[b.history + 31] = (b.bins[b.history + 31] + 50) % 256;
  auto sa = model->initial_state(1), sb = model->initial_state(1);
  const double la = loss_and_grads(*model, a, sa);
  const auto ga = gradients(model->parameters());
  const double lb = loss_and_grads(*model, b, sb);
  EXPECT_EQ(la, lb);
  EXPECT_EQ(gradients(model->parameters()), ga);

  auto full = a;
  std::fill(full.weights.begin(), full.weights.end(), 1.0);
  auto sf = model->initial_state(1);
  EXPECT_NE(loss_and_grads(*model, full, sf), la);
}

TEST(TbpttStep, GradientsTruncatedAtSubsequenceStart) {
  const ModelConfig cfg = tiny_config({2, 2, 8});
  auto model = make_model<double>(cfg, 9);
  jitter(*model, 10, 0.2);
  // the two runs share only the history window in front of the third piece
  auto head = noise(64, 11);
  auto other = head;
  std::fill(other.begin(), other.end() - 8, 0.0);
  auto random_first = model->encode(head);
  auto silent_first = model->encode(other);
  const auto second = noise(32, 12);
  auto with_tail = [&](EncodedSequence s) {
    const auto enc = model->encode(second);
    s.bins.insert(s.bins.end(), enc.bins.begin(), enc.bins.end());
    s.inputs.insert(s.inputs.end(), enc.inputs.begin(), enc.inputs.end());
    return s;
  };
  const auto run_a = with_tail(random_first), run_b = with_tail(silent_first);

  auto sa = model->initial_state(1), sb = model->initial_state(1);
  loss_and_grads(*model, row_batch(*model, run_a, 0, 32), sa);
  loss_and_grads(*model, row_batch(*model, run_a, 32, 32), sa);
  loss_and_grads(*model, row_batch(*model, run_b, 0, 32), sb);
  loss_and_grads(*model, row_batch(*model, run_b, 32, 32), sb);
  sb = sa;  // identical carried values, different history behind them
  const double la = loss_and_grads(*model, row_batch(*model, run_a, 64, 32), sa);
  const auto ga = gradients(model->parameters());
  const double lb = loss_and_grads(*model, row_batch(*model, run_b, 64, 32), sb);
  EXPECT_EQ(la, lb);
  EXPECT_EQ(gradients(model->parameters()), ga);
}

TEST(Adam, MatchesScalarOracleOverHundredSteps) {
  Rng rng(13);
  Tensor<double> p(Shape{5}, std::vector<double>{0.3, -1.2, 0.0, 2.5, -0.01});
  p.set_requires_grad(true);
  ParameterList<double> params{{"p", p}};
  OptimState optim;
  TrainConfig cfg;
  std::vector<double> x(p.values().begin(), p.values().end()), m(5, 0.0), v(5, 0.0);
  for (int t = 1; t <= 100; ++t) {
    auto g = p.grad();
    for (auto& e : g) e = std::clamp(rng.normal(), -1.0, 1.0);
    std::vector<double> gs(g.begin(), g.end());
    adam_update(params, optim, cfg);
    for (std::size_t i = 0; i < 5; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * gs[i];
      v[i] = 0.999 * v[i] + 0.001 * gs[i] * gs[i];
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      x[i] -= 1e-3 * mh / (std::sqrt(vh) + 1e-8);
    }
    for (std::size_t i = 0; i < 5; ++i) ASSERT_NEAR(p[i], x[i], 1e-12) << "step " << t;
  }
  EXPECT_EQ(optim.t, 100u);
}

TEST(Adam, ZeroGradientNoChange) {
  Tensor<double> p(Shape{3}, std::vector<double>{1, 2, 3});
  p.set_requires_grad(true);
  p.zero_grad();
  ParameterList<double> params{{"p", p}};
  OptimState optim;
  adam_update(params, optim, TrainConfig{});
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], 2.0);
  EXPECT_EQ(p[2], 3.0);
}

TEST(EvaluateNll, UniformModelIsEightBits) {
  const Corpus c = small_markov();
  auto model = make_model<float>(tiny_config({2, 2, 8}), 14);
  const EvalResult r = evaluate_nll(*model, c.valid, 64);
  EXPECT_NEAR(r.bits, 8.0, 1e-6);
  EXPECT_EQ(r.positions, c.valid.size() * 640);
}

TEST(EvaluateNll, InvariantToEvalLength) {
  const Corpus c = small_markov();
  auto model = make_model<float>(tiny_config({2, 2, 8}, 16), 15);
  jitter(*model, 16, 0.2);
  const double a = evaluate_nll(*model, c.valid, 32).bits;
  for (std::size_t L : {64, 128, 512}) EXPECT_NEAR(evaluate_nll(*model, c.valid, L).bits, a, 1e-5) << L;
}

TEST(EvaluateNll, PaddedBatchEqualsSequencesAlone) {
  auto model = make_model<double>(tiny_config({2, 2, 8}), 17);
  jitter(*model, 18, 0.2);
  std::vector<AudioSequence> seqs;
  for (std::size_t n : {37u, 100u, 64u, 5u}) {
    AudioSequence s;
    s.samples = noise(n, 19 + n);
    seqs.push_back(s);
  }
  const EvalResult together = evaluate_nll(*model, seqs, 32, 4);
  double total = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const EvalResult alone = evaluate_nll(*model, std::vector<AudioSequence>{seqs[i]}, 32, 1);
    EXPECT_NEAR(together.per_sequence[i], alone.bits, 1e-10);
    total += alone.total_bits;
  }
  EXPECT_NEAR(together.total_bits, total, 1e-9);
  EXPECT_EQ(together.positions, 206u);
}

TEST(EvaluateNll, EmptySplitIsDataError) {
  auto model = make_model<float>(tiny_config({2, 2}), 20);
  EXPECT_THROW(evaluate_nll(*model, {}, 32), DataError);
}

TEST(TrainConfig, Validation) {
  const ModelConfig model = tiny_config({2, 2, 8});
  TrainConfig t;
  t.subseq_len = 100;
  try {
    t.validate(model);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "train.subseq_len");
  }
  t.subseq_len = 64;
  t.batch_size = 0;
  EXPECT_THROW(t.validate(model), ConfigError);
  t.batch_size = 1;
  EXPECT_NO_THROW(t.validate(model));
}

TEST(Checkpoint, SerializeRoundTrip) {
  Checkpoint c;
  c.set("a", "1");
  c.set("model.q", "256");
  const std::vector<float> f{1.5f, -2.25f, 3.0f};
  const std::vector<double> d{0.1, 1e-300};
  c.add("f", DType::kFloat32, {3}, std::span<const float>(f));
  c.add("d", DType::kFloat64, {1, 2}, std::span<const double>(d));
  const auto bytes = serialize_checkpoint(c);
  ASSERT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SRNN");
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.metadata, c.metadata);
  EXPECT_EQ(back.tensor("f").values, std::vector<double>(f.begin(), f.end()));
  EXPECT_EQ(back.tensor("d").values, d);
  EXPECT_EQ(back.tensor("d").shape, (Shape{1, 2}));
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, DistinctLoadErrors) {
  Checkpoint c;
  const std::vector<float> f{1, 2, 3, 4};
  c.add("w", DType::kFloat32, {2, 2}, std::span<const float>(f));
  const auto good = serialize_checkpoint(c);
  auto kind_of = [](const std::vector<std::uint8_t>& bytes) {
    try {
      deserialize_checkpoint(bytes);
    } catch (const CheckpointError& e) {
      return e.kind();
    }
    return CheckpointErrorKind::kIo;
  };
  auto magic = good;
  magic[0] = 'X';
  EXPECT_EQ(kind_of(magic), CheckpointErrorKind::kBadMagic);
  auto version = good;
  version[4] = 9;
  EXPECT_EQ(kind_of(version), CheckpointErrorKind::kVersionMismatch);
  auto cut = good;
  cut.resize(good.size() - 3);
  EXPECT_EQ(kind_of(cut), CheckpointErrorKind::kTruncated);

  Tensor<float> wrong(Shape{4});
  try {
    c.restore("w", wrong);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointErrorKind::kShapeMismatch);
  }
  try {
    c.tensor("missing");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointErrorKind::kMissingTensor);
  }
  TempDir dir;
  try {
    load_checkpoint(dir / "absent.ckpt");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.kind(), CheckpointErrorKind::kIo);
  }
}

TEST(Checkpoint, SaveLoadEvalIsExact) {
  const Corpus c = small_markov();
  Trainer<float> trainer(tiny_config({2, 2, 8}, 16), quick_train(64, 10), c);
  trainer.run();
  TempDir dir;
  save_checkpoint(dir / "m.ckpt", trainer.checkpoint());
  const auto model = read_model<float>(load_checkpoint(dir / "m.ckpt"));
  EXPECT_EQ(evaluate_nll(*model, c.valid, 64).bits, evaluate_nll(trainer.model(), c.valid, 64).bits);
  EXPECT_FALSE(std::filesystem::exists(dir / "m.ckpt.tmp"));
}

TEST(Checkpoint, AdamMomentsStoredPerParameter) {
  const Corpus c = small_markov();
  Trainer<float> trainer(tiny_config({2, 2}), quick_train(32, 3), c);
  trainer.run();
  const Checkpoint ckpt = trainer.checkpoint();
  for (const auto& p : trainer.model().parameters()) {
    EXPECT_NE(ckpt.find(p.name), nullptr) << p.name;
    EXPECT_NE(ckpt.find(p.name + ".adam_m"), nullptr) << p.name;
    EXPECT_NE(ckpt.find(p.name + ".adam_v"), nullptr) << p.name;
  }
}

TEST(Trainer, DeterministicRuns) {
  const Corpus c = small_markov();
  TempDir a, b;
  Trainer<float>(tiny_config({2, 2, 8}), quick_train(), c).run(a.path());
  Trainer<float>(tiny_config({2, 2, 8}), quick_train(), c).run(b.path());
  EXPECT_EQ(read_text(a / "metrics.tsv"), read_text(b / "metrics.tsv"));
  EXPECT_EQ(read_bytes(a / "last.ckpt"), read_bytes(b / "last.ckpt"));
  EXPECT_EQ(read_bytes(a / "best.ckpt"), read_bytes(b / "best.ckpt"));
}

TEST(Trainer, ResumeMatchesUninterrupted) {
  for (auto cell : {CellKind::kGru, CellKind::kLstm}) {
    const Corpus c = small_markov();
    ModelConfig cfg = tiny_config({2, 2, 8});
    cfg.cell = cell;
    TempDir full, part;
    Trainer<float>(cfg, quick_train(64, 40), c).run(full.path());
    Trainer<float>(cfg, quick_train(64, 20), c).run(part.path());
    Trainer<float> resumed(load_checkpoint(part / "last.ckpt"), c, quick_train(64, 40));
    EXPECT_EQ(resumed.step_count(), 20u);
    resumed.run(part.path());
    EXPECT_EQ(read_text(full / "metrics.tsv"), read_text(part / "metrics.tsv"));
    EXPECT_EQ(read_bytes(full / "last.ckpt"), read_bytes(part / "last.ckpt"));
  }
}

TEST(Trainer, MetricsLogFormat) {
  EXPECT_EQ(format_metrics_row({100, 2.5, 2.25}), "100\t2.500000\t2.250000");
  const Corpus c = small_markov();
  TempDir dir;
  const auto s = Trainer<float>(tiny_config({2, 2}), quick_train(32, 25), c).run(dir.path());
  ASSERT_EQ(s.metrics.size(), 3u);
  EXPECT_EQ(s.metrics.back().step, 25u);
  const std::string log = read_text(dir / "metrics.tsv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
}

TEST(Trainer, EarlyStopping) {
  Corpus c = small_markov();
  // validation drawn from other bins gets worse as training fits the chain
  for (auto& s : c.valid) s.samples = noise(s.size(), 31, 0.9);
  TrainConfig t = quick_train(32, 1000);
  t.eval_every = 2;
  t.patience = 2;
  t.learning_rate = 1e-2;
  const auto s = Trainer<float>(tiny_config({2, 2}), t, c).run();
  EXPECT_TRUE(s.early_stopped);
  EXPECT_LT(s.steps, 1000u);
  EXPECT_EQ(s.steps, s.best_step + 2 * t.eval_every);
}

TEST(Trainer, LossDecreasesOnOverfitCorpus) {
  AudioSequence clip;
  Rng rng(21);
  clip.samples = synth_sine(440.0, 0.25, 0.6, rng).samples;
  Corpus c;
  c.train = {clip};
  c.valid = {clip};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TrainConfig t = quick_train(64, 60);
    t.seed = seed;
    t.batch_size = 1;
    Trainer<float> trainer(tiny_config({2, 2}, 16), t, c);
    const double before = trainer.validate().bits;
    trainer.run();
    EXPECT_LT(trainer.validate().bits, before) << seed;
  }
}

TEST(Trainer, ConstantSignalMemorised) {
  AudioSequence flat;
  flat.samples.assign(2048, 0.3);
  Corpus c;
  c.train = {flat};
  c.valid = {flat};
  TrainConfig t = quick_train(64, 300);
  t.batch_size = 2;
  t.learning_rate = 1e-2;
  t.eval_every = 300;
  Trainer<float> trainer(tiny_config({2, 2}, 16), t, c);
  trainer.run();
  EXPECT_LT(trainer.validate().bits, 0.01);
}

TEST(Trainer, GmmApproachesGaussianEntropy) {
  std::vector<AudioSequence> items;
  for (std::uint64_t i = 0; i < 10; ++i) {
    Rng rng(100 + i);
    AudioSequence s;
    s.samples.resize(2048);
    for (auto& x : s.samples) x = 0.2 * rng.normal();
    items.push_back(std::move(s));
  }
  const Corpus c = split_corpus(std::move(items), {0.8, 0.2, 0.0});
  TrainConfig t = quick_train(64, 400);
  t.batch_size = 8;
  t.eval_every = 400;
  t.learning_rate = 3e-3;
  TrainSummary summary;
  const double bits = train_variant<float>(Variant::kGmm, tiny_config({2, 2}, 16), t, c, &summary);
  const double entropy = 0.5 * std::log2(2 * std::numbers::pi * std::numbers::e);
  EXPECT_NEAR(entropy, 2.047, 1e-3);
  EXPECT_LT(bits, entropy + 0.1);
  EXPECT_GT(bits, entropy - 0.1);
}

TEST(SubsequenceStream, RowsStreamInOrderAndReset) {
  SubsequenceStream stream({128, 64, 256}, 2, 64, 5);
  std::vector<std::size_t> last_offset(2, 0), seq(2, 0);
  for (int step = 0; step < 20; ++step) {
    const auto slots = stream.next();
    ASSERT_EQ(slots.size(), 2u);
    for (std::size_t r = 0; r < 2; ++r) {
      if (slots[r].reset) {
        EXPECT_EQ(slots[r].offset, 0u);
      } else {
        EXPECT_EQ(slots[r].sequence, seq[r]);
        EXPECT_EQ(slots[r].offset, last_offset[r] + 64);
      }
      seq[r] = slots[r].sequence;
      last_offset[r] = slots[r].offset;
    }
  }
}

TEST(SubsequenceStream, SerializeContinuesIdentically) {
  SubsequenceStream a({128, 64, 256, 192}, 3, 64, 9);
  for (int i = 0; i < 7; ++i) a.next();
  SubsequenceStream b({128, 64, 256, 192}, 3, 64, 1234);
  b.deserialize(a.serialize());
  for (int i = 0; i < 30; ++i) {
    const auto x = a.next(), y = b.next();
    for (std::size_t r = 0; r < 3; ++r) {
      ASSERT_EQ(x[r].sequence, y[r].sequence);
      ASSERT_EQ(x[r].offset, y[r].offset);
      ASSERT_EQ(x[r].reset, y[r].reset);
    }
  }
  EXPECT_THROW(SubsequenceStream({10, 20}, 1, 64, 0), DataError);
}
