#include <benchmark/benchmark.h>

#include "ldnet/data.hpp"
#include "ldnet/model.hpp"
#include "ldnet/training.hpp"

namespace ldnet {
namespace {

// Args: base width, input size.
void BM_ModelForwardEval(benchmark::State& state) {
  LdnetConfig config;
  config.base_width = static_cast<std::size_t>(state.range(0));
  const auto s = static_cast<std::size_t>(state.range(1));
  Ldnet<float> model(config);
  auto x = Tensor<float>({1, 1, s, s}, 0.5f);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(x, {Mode::kEval, 0}));
}
BENCHMARK(BM_ModelForwardEval)->Args({8, 64})->Args({16, 256})->Unit(benchmark::kMillisecond);

void BM_TrainEpoch(benchmark::State& state) {
  LdnetConfig config;
  config.base_width = 8;
  config.num_classes = 2;
  std::vector<SegmentationSample> data;
  for (std::uint64_t s = 0; s < 8; ++s) data.push_back(synth_scene(s, {64, 2, 1, 4}));
  Ldnet<float> model(config);
  TrainConfig tc;
  tc.max_epochs = 1 << 20;
  Trainer<float> trainer(model, tc);
  int epoch = 0;
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_epoch(data, epoch++));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(data.size()));
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace ldnet
