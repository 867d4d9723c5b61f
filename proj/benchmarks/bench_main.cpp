#include <benchmark/benchmark.h>

#include "samplernn/audio.hpp"
#include "samplernn/ops.hpp"
#include "samplernn/trainer.hpp"

using namespace samplernn;

namespace {

ModelConfig desk_model(std::size_t tiers, std::size_t hidden) {
  ModelConfig cfg;
  cfg.frame_sizes = tiers == 2 ? std::vector<std::size_t>{2, 8} : std::vector<std::size_t>{2, 2, 8};
  cfg.hidden = hidden;
  return cfg;
}

void BM_Generate(benchmark::State& state) {
  const auto model = make_model<float>(desk_model(static_cast<std::size_t>(state.range(0)),
                                                  static_cast<std::size_t>(state.range(1))), 1);
  GenerateOptions g;
  g.samples = 4000;
  for (auto _ : state) {
    benchmark::DoNotOptimize(model->generate(g));
    ++g.seed;
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(g.samples));
}
BENCHMARK(BM_Generate)->Args({2, 64})->Args({2, 128})->Args({3, 128})->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const auto L = static_cast<std::size_t>(state.range(0));
  std::vector<AudioSequence> items;
  for (std::uint64_t i = 0; i < 16; ++i) items.push_back(synth_markov(MarkovChain::uniform(4), 4 * L, i));
  const Corpus corpus = split_corpus(std::move(items), {0.75, 0.25, 0.0});
  TrainConfig t;
  t.subseq_len = L;
  t.batch_size = 16;
  Trainer<float> trainer(desk_model(2, 64), t, corpus);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(L * t.batch_size));
}
BENCHMARK(BM_TrainStep)->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond);

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor<float> a(Shape{n, n}, std::vector<float>(n * n, 0.5f));
  Tensor<float> b(Shape{n, n}, std::vector<float>(n * n, 0.25f));
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

}  // namespace
BENCHMARK_MAIN();
