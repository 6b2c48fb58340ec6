#include <benchmark/benchmark.h>

#include <numeric>
#include <random>

#include "vitscope/detect.hpp"
#include "vitscope/surgery.hpp"
#include "vitscope/train.hpp"
#include "vitscope/vit.hpp"

namespace {

using namespace vitscope;

Tensor random_images(std::size_t n, const ViTConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n * c.channels * c.image_size * c.image_size);
  for (auto& x : v) x = u(rng);
  return Tensor::from({n, c.channels, c.image_size, c.image_size}, v);
}

void BM_Forward(benchmark::State& state) {
  const ViTConfig c;
  const ModelParams p = init_params(c, 1);
  const Tensor x = random_images(static_cast<std::size_t>(state.range(0)), c, 2);
  for (auto _ : state) benchmark::DoNotOptimize(predict_logits(p, x));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_TrainEpoch(benchmark::State& state) {
  const ViTConfig c;
  const ModelParams p = init_params(c, 1);
  LabeledImages data{random_images(64, c, 3), std::vector<int>(64)};
  for (std::size_t i = 0; i < 64; ++i) data.labels[i] = static_cast<int>(i % c.n_classes);
  TrainConfig tc;
  tc.epochs = 1;
  for (auto _ : state) benchmark::DoNotOptimize(train(p, data, tc));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);

void BM_GridSearch(benchmark::State& state) {
  const ViTConfig c;
  const ModelParams p = init_params(c, 1);
  std::vector<std::size_t> layers(c.n_blocks);
  std::iota(layers.begin(), layers.end(), 1);
  const auto ts = geometric_thresholds(0.02, 2.0, 20);
  for (auto _ : state) benchmark::DoNotOptimize(grid_search(p, layers, ts));
}
BENCHMARK(BM_GridSearch)->Unit(benchmark::kMillisecond);

void BM_Orthogonalize(benchmark::State& state) {
  const ViTConfig c;
  const ModelParams p = init_params(c, 1);
  std::vector<double> r(c.d_model, 0.0);
  r[0] = 1.0;
  for (auto _ : state) benchmark::DoNotOptimize(orthogonalize_params(p, r));
}
BENCHMARK(BM_Orthogonalize)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
