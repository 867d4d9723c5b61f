#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "samplernn/cells.hpp"
#include "samplernn/errors.hpp"
#include "support.hpp"

using namespace samplernn;
using namespace samplernn::testing;
using T64 = Tensor<double>;

namespace {

void zero_layer(WeightNormLinear<double>& l) {
  for (auto& g : l.scale().mutable_values()) g = 0.0;
  if (l.has_bias()) {
    for (auto& b : l.bias().mutable_values()) b = 0.0;
  }
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// y = W x + b with W [out x in] read from the layer's effective weight.
std::vector<double> affine(const WeightNormLinear<double>& l, std::span<const double> x) {
  const T64 w = l.weight();
  std::vector<double> y(l.out_dim(), 0.0);
  for (std::size_t i = 0; i < l.out_dim(); ++i) {
    for (std::size_t j = 0; j < l.in_dim(); ++j) y[i] += w[i * l.in_dim() + j] * x[j];
    if (l.has_bias()) y[i] += l.bias()[i];
  }
  return y;
}

std::vector<double> gru_oracle(const GruCell<double>& cell, std::span<const double> h, std::span<const double> x) {
  const std::size_t H = h.size();
  const auto gx = affine(cell.input_map(), x);
  const auto gh = affine(cell.hidden_map(), h);
  std::vector<double> out(H);
  for (std::size_t i = 0; i < H; ++i) {
    const double r = sig(gx[i] + gh[i]);
    const double z = sig(gx[H + i] + gh[H + i]);
    const double n = std::tanh(gx[2 * H + i] + r * gh[2 * H + i]);
    out[i] = (1 - z) * h[i] + z * n;
  }
  return out;
}

std::pair<std::vector<double>, std::vector<double>> lstm_oracle(const LstmCell<double>& cell, std::span<const double> h,
                                                                std::span<const double> c, std::span<const double> x) {
  const std::size_t H = h.size();
  const auto gx = affine(cell.input_map(), x);
  const auto gh = affine(cell.hidden_map(), h);
  std::vector<double> ho(H), co(H);
  for (std::size_t k = 0; k < H; ++k) {
    const double i = sig(gx[k] + gh[k]);
    const double f = sig(gx[H + k] + gh[H + k]);
    const double g = std::tanh(gx[2 * H + k] + gh[2 * H + k]);
    const double o = sig(gx[3 * H + k] + gh[3 * H + k]);
    co[k] = f * c[k] + i * g;
    ho[k] = o * std::tanh(co[k]);
  }
  return {ho, co};
}

}  // namespace

TEST(Gru, ZeroWeightsHalveState) {
  Rng rng(1);
  GruCell<double> cell(3, 5, rng);
  zero_layer(cell.input_map());
  zero_layer(cell.hidden_map());
  const T64 h = random_tensor<double>({5}, rng);
  const T64 x = random_tensor<double>({3}, rng);
  const T64 out = gru_step(cell, h, x);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(out[i], 0.5 * h[i], 1e-15);
}

TEST(Gru, ZeroStateAndInputStayZero) {
  Rng rng(2);
  GruCell<double> cell(3, 5, rng);
  for (auto& b : cell.input_map().bias().mutable_values()) b = 0.0;
  const T64 out = gru_step(cell, T64(Shape{5}), T64(Shape{3}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Gru, MatchesScalarLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    GruCell<double> cell(4, 6, rng);
    for (auto& b : cell.input_map().bias().mutable_values()) b = rng.normal();
    const T64 h = random_tensor<double>({6}, rng, 0.5);
    const T64 x = random_tensor<double>({4}, rng);
    const T64 out = gru_step(cell, h, x);
    const auto want = gru_oracle(cell, h.values(), x.values());
    EXPECT_LT(max_abs_diff(out.values(), want), 1e-10);
  }
}

TEST(Gru, ShapeMismatch) {
  Rng rng(4);
  GruCell<double> cell(3, 5, rng);
  EXPECT_THROW(gru_step(cell, T64(Shape{4}), T64(Shape{3})), DimensionError);
  EXPECT_THROW(gru_step(cell, T64(Shape{5}), T64(Shape{2})), DimensionError);
}

TEST(Gru, HiddenToHiddenBlocksOrthogonal) {
  Rng rng(5);
  GruCell<double> cell(3, 6, rng);
  const T64 w = cell.hidden_map().weight();
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 6; ++j) {
        double s = 0;
        for (std::size_t k = 0; k < 6; ++k) s += w[(b * 6 + k) * 6 + i] * w[(b * 6 + k) * 6 + j];
        EXPECT_NEAR(s, i == j ? 1.0 : 0.0, 1e-6);
      }
    }
  }
}

TEST(Lstm, ForgetBiasStartsAtThree) {
  Rng rng(6);
  LstmCell<double> cell(3, 4, rng);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(cell.input_map().bias()[i], (i >= 4 && i < 8) ? 3.0 : 0.0);
}

TEST(Lstm, ZeroWeightsKeepForgetFraction) {
  Rng rng(7);
  LstmCell<double> cell(3, 4, rng);
  for (auto& g : cell.input_map().scale().mutable_values()) g = 0.0;
  zero_layer(cell.hidden_map());
  const T64 h = random_tensor<double>({4}, rng);
  const T64 c = random_tensor<double>({4}, rng);
  const auto [h1, c1] = lstm_step(cell, h, c, random_tensor<double>({3}, rng));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(c1[i], sig(3.0) * c[i], 1e-15);
    EXPECT_NEAR(sig(3.0), 0.9526, 1e-4);
  }
}

TEST(Lstm, ZeroEverythingGivesZero) {
  Rng rng(8);
  LstmCell<double> cell(3, 4, rng);
  for (auto& b : cell.input_map().bias().mutable_values()) b = 0.0;
  const auto [h1, c1] = lstm_step(cell, T64(Shape{4}), T64(Shape{4}), T64(Shape{3}));
  for (double v : h1.values()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, MatchesScalarLoopOracle) {
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    LstmCell<double> cell(5, 3, rng);
    for (auto& b : cell.input_map().bias().mutable_values()) b += 0.3 * rng.normal();
    const T64 h = random_tensor<double>({3}, rng, 0.5);
    const T64 c = random_tensor<double>({3}, rng);
    const T64 x = random_tensor<double>({5}, rng);
    const auto [h1, c1] = lstm_step(cell, h, c, x);
    const auto [hw, cw] = lstm_oracle(cell, h.values(), c.values(), x.values());
    EXPECT_LT(max_abs_diff(h1.values(), hw), 1e-10);
    EXPECT_LT(max_abs_diff(c1.values(), cw), 1e-10);
  }
}

TEST(Cells, HiddenStaysInsideUnitInterval) {
  Rng rng(10);
  GruCell<double> gru(4, 8, rng);
  LstmCell<double> lstm(4, 8, rng);
  T64 h = random_tensor<double>({8}, rng, 0.5);
  T64 lh = h, lc = random_tensor<double>({8}, rng);
  for (int step = 0; step < 200; ++step) {
    const T64 x = random_tensor<double>({4}, rng, 20.0);
    h = gru_step(gru, h, x);
    std::tie(lh, lc) = lstm_step(lstm, lh, lc, x);
    for (std::size_t i = 0; i < 8; ++i) {
      ASSERT_LE(std::abs(h[i]), 1.0);
      ASSERT_LE(std::abs(lh[i]), 1.0);
    }
  }
}

TEST(Mlp, ZeroInputZeroBiasGivesUniform) {
  Rng rng(11);
  Mlp<double> mlp(6, 10, 16, false, rng);
  const T64 out = mlp.forward(T64(Shape{2, 6}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, ZeroOutputInitIsUniform) {
  Rng rng(12);
  Mlp<double> mlp(6, 10, 16, true, rng);
  const T64 out = mlp.forward(random_tensor<double>({3, 6}, rng));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, SingleUnitAffineByHand) {
  Rng rng(13);
  Mlp<double> mlp(1, 1, 1, false, rng);
  // relu(2x + 1) -> relu(3 h) -> -0.5 h + 4
  const double w[3] = {2.0, 3.0, -0.5}, b[3] = {1.0, 0.0, 4.0};
  for (std::size_t l = 0; l < 3; ++l) {
    auto& layer = mlp.layers()[l];
    layer.direction().mutable_values()[0] = 1.0;
    layer.scale().mutable_values()[0] = w[l];
    layer.bias().mutable_values()[0] = b[l];
  }
  for (double x : {-2.0, -0.25, 0.7, 3.0}) {
    const double want = -0.5 * std::max(0.0, 3.0 * std::max(0.0, 2 * x + 1)) + 4.0;
    EXPECT_NEAR(mlp.forward(T64(Shape{1, 1}, {x})).item(), want, 1e-15);
  }
}

TEST(Mlp, GradientThroughAllLayers) {
  Rng rng(14);
  Mlp<double> mlp(4, 6, 5, false, rng);
  for (auto& l : mlp.layers()) {
    for (auto& b : l.bias().mutable_values()) b = 0.2 * rng.normal();
  }
  T64 x = random_tensor<double>({3, 4}, rng);
  std::vector<Tensor<double>*> ts{&x};
  for (auto& l : mlp.layers()) {
    ts.push_back(&l.direction());
    ts.push_back(&l.scale());
    ts.push_back(&l.bias());
  }
  const std::vector<int> targets{0, 3, 4};
  const double err =
      fd_max_rel_error(ts, [&] { return ops::softmax_cross_entropy(mlp.forward(x), std::span<const int>(targets)); });
  EXPECT_LT(err, 1e-4);
}

TEST(Embedding, RowLookupAndSparseGradient) {
  Rng rng(15);
  Embedding<double> table(16, 4, rng);
  for (std::size_t j = 0; j < 4; ++j) table.table().mutable_values()[7 * 4 + j] = 1.0;
  const T64 row = embed(table, 7);
  for (double v : row.values()) EXPECT_EQ(v, 1.0);

  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(ops::sum(embed(table, 3)));
  }
  const auto g = table.table().grad();
  for (std::size_t r = 0; r < 16; ++r) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(g[r * 4 + j], r == 3 ? 1.0 : 0.0);
  }
  EXPECT_THROW(embed(table, 16), IndexError);
  EXPECT_THROW(embed(table, -1), IndexError);
}

TEST(Embedding, BatchLookupEqualsPerElement) {
  Rng rng(16);
  Embedding<double> table(32, 5, rng);
  const std::vector<int> bins{4, 31, 0, 4, 17};
  const T64 batch = table.lookup(bins);
  for (std::size_t i = 0; i < bins.size(); ++i) {
    const T64 row = embed(table, bins[i]);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(batch[i * 5 + j], row[j]);
  }
}

TEST(Embedding, StandardNormalInit) {
  Rng rng(17);
  Embedding<double> table(256, 64, rng);
  double mean = 0, sq = 0;
  for (double v : table.table().values()) mean += v;
  mean /= static_cast<double>(table.table().size());
  for (double v : table.table().values()) sq += (v - mean) * (v - mean);
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(sq / static_cast<double>(table.table().size()), 1.0, 0.05);
}

TEST(Gmm, SingleComponentAtMean) {
  const double x = 0.37;
  const T64 params(Shape{1, 3}, {0.0, x, 0.0});
  const std::vector<double> t{x};
  EXPECT_NEAR(ops::gmm_nll(params, std::span<const double>(t)).item(), 0.5 * std::log(2 * std::numbers::pi), 1e-12);
  EXPECT_NEAR(0.5 * std::log(2 * std::numbers::pi), 0.9189, 1e-4);
}

TEST(Gmm, IdenticalComponentsCollapse) {
  const T64 params(Shape{1, 6}, {0.3, 0.3, 0.0, 0.0, 0.0, 0.0});
  const std::vector<double> t{0.0};
  EXPECT_NEAR(ops::gmm_nll(params, std::span<const double>(t)).item(), 0.5 * std::log(2 * std::numbers::pi), 1e-12);
}

TEST(Gmm, MatchesDirectDensitySum) {
  Rng rng(18);
  const std::size_t C = 4, N = 20;
  const T64 params = random_tensor<double>({N, 3 * C}, rng);
  std::vector<double> targets(N);
  for (auto& t : targets) t = rng.normal();
  std::vector<double> per_row;
  const double loss = ops::gmm_nll(params, std::span<const double>(targets), {}, &per_row).item();
  double mean = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const double* p = params.data() + n * 3 * C;
    double z = 0, dens = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(p[c]);
    for (std::size_t c = 0; c < C; ++c) {
      const double s = std::exp(p[2 * C + c]);
      const double u = (targets[n] - p[C + c]) / s;
      dens += std::exp(p[c]) / z * std::exp(-0.5 * u * u) / (s * std::sqrt(2 * std::numbers::pi));
    }
    const double want = -std::log(dens);
    EXPECT_NEAR(per_row[n], want, 1e-10 * std::max(1.0, std::abs(want)));
    mean += want / N;
  }
  EXPECT_NEAR(loss, mean, 1e-10 * std::max(1.0, std::abs(mean)));
}

TEST(Gmm, GradientMatchesFiniteDifferences) {
  Rng rng(19);
  T64 params = random_tensor<double>({5, 12}, rng, 0.7);
  std::vector<double> t(5);
  for (auto& v : t) v = rng.normal();
  EXPECT_LT(fd_max_rel_error({&params}, [&] { return ops::gmm_nll(params, std::span<const double>(t)); }), 1e-4);
}

TEST(Gmm, SamplingFollowsMixture) {
  Rng rng(20);
  GmmHead head{2};
  const std::vector<double> row{0.0, std::log(3.0), -2.0, 2.0, std::log(0.5), std::log(0.5)};
  double mean = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) mean += head.sample(std::span<const double>(row), rng);
  EXPECT_NEAR(mean / n, 0.25 * -2.0 + 0.75 * 2.0, 0.02);
}

TEST(MultiSoftmax, ZeroLogitsGiveFrameTimesLogQ) {
  MultiSoftmaxHead head{2, 256};
  const T64 out(Shape{3, head.out_dim()});
  const T64 per = head.per_sample_logits(out);
  EXPECT_EQ(per.shape(), (Shape{6, 256}));
  const std::vector<int> targets{1, 2, 3, 4, 5, 6};
  const double mean = ops::softmax_cross_entropy(per, std::span<const int>(targets)).item();
  EXPECT_NEAR(mean * 2, 2 * std::log(256.0), 1e-12);
}

TEST(MultiSoftmax, FrameOfOneIsPlainSoftmax) {
  Rng rng(21);
  MultiSoftmaxHead head{1, 8};
  T64 out = random_tensor<double>({4, 8}, rng);
  const std::vector<int> targets{1, 7, 0, 3};
  const double a = ops::softmax_cross_entropy(head.per_sample_logits(out), std::span<const int>(targets)).item();
  const double b = ops::softmax_cross_entropy(out, std::span<const int>(targets)).item();
  EXPECT_EQ(a, b);
}

TEST(MultiSoftmax, SlicesAreIndependent) {
  Rng rng(22);
  MultiSoftmaxHead head{2, 8};
  const T64 out = random_tensor<double>({1, 16}, rng);
  std::vector<double> before, after;
  std::vector<int> t{2, 5};
  ops::softmax_cross_entropy(head.per_sample_logits(out), std::span<const int>(t), {}, &before);
  t[0] = 6;
  ops::softmax_cross_entropy(head.per_sample_logits(out), std::span<const int>(t), {}, &after);
  EXPECT_NE(before[0], after[0]);
  EXPECT_EQ(before[1], after[1]);
}

TEST(SampleCategorical, FollowsSoftmax) {
  Rng rng(23);
  const std::vector<double> logits{0.0, std::log(2.0), std::log(5.0)};
  std::vector<int> counts(3);
  const int n = 80000;
  for (int i = 0; i < n; ++i) ++counts[sample_categorical(std::span<const double>(logits), 1.0, rng)];
  EXPECT_NEAR(counts[0] / double(n), 0.125, 0.01);
  EXPECT_NEAR(counts[1] / double(n), 0.25, 0.01);
  EXPECT_NEAR(counts[2] / double(n), 0.625, 0.01);
  EXPECT_THROW(sample_categorical(std::span<const double>(logits), 0.0, rng), ContractError);
}
