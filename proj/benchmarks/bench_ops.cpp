#include <benchmark/benchmark.h>

#include <random>

#include "ldnet/layers.hpp"
#include "ldnet/ops.hpp"

namespace ldnet {
namespace {

Tensor<float> random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<float>(std::move(shape), std::move(v), requires_grad);
}

// Args: spatial size, channels, dilation.
void BM_Conv3x3Forward(benchmark::State& state) {
  const auto s = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1));
  const int rate = static_cast<int>(state.range(2));
  auto x = random_tensor({1, c, s, s}, 1);
  auto w = random_tensor({c, c, 3, 3}, 2);
  auto b = random_tensor({c}, 3);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, {1, same_padding(3, rate), rate}));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s * s * c * c * 9));
}
BENCHMARK(BM_Conv3x3Forward)->Args({64, 16, 1})->Args({64, 16, 8})->Args({128, 32, 1})->Args({32, 64, 4});

void BM_Conv3x3ForwardBackward(benchmark::State& state) {
  const auto s = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1));
  auto x = random_tensor({1, c, s, s}, 1, true);
  auto w = random_tensor({c, c, 3, 3}, 2, true);
  auto b = random_tensor({c}, 3, true);
  for (auto _ : state) {
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
    sum(conv2d(x, w, b, {1, 1, 1})).backward();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(s * s * c * c * 9));
}
BENCHMARK(BM_Conv3x3ForwardBackward)->Args({64, 16})->Args({128, 32});

void BM_DropBlockMask(benchmark::State& state) {
  const auto s = static_cast<std::size_t>(state.range(0));
  const double gamma = dropblock_gamma(0.9, 5, static_cast<int>(s));
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(dropblock_mask(16, s, s, 5, gamma, ++seed));
}
BENCHMARK(BM_DropBlockMask)->Arg(32)->Arg(256);

void BM_BatchNormTrain(benchmark::State& state) {
  auto x = random_tensor({4, 16, 64, 64}, 4);
  auto g = Tensor<float>::ones({16}), b = Tensor<float>::zeros({16});
  auto stats = BatchNormStats<float>::make(16);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(batchnorm2d(x, g, b, stats, Mode::kTrain));
}
BENCHMARK(BM_BatchNormTrain);

}  // namespace
}  // namespace ldnet
