#include <benchmark/benchmark.h>

#include "xnet/ops.hpp"
#include "xnet/rng.hpp"

using namespace xnet;

namespace {

Tensor uniform(const Shape& s, std::uint64_t seed, bool grad = false) {
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(s.numel()));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto t = Tensor::from_data(s, std::move(v));
  t.set_requires_grad(grad);
  return t;
}

void BM_ChannelLinear(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  auto x = uniform(Shape{8, c, 16, 16}, 1);
  auto w = uniform(Shape{c, 4 * c}, 2);
  auto b = uniform(Shape{4 * c}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(ops::channel_linear(x, w, b).data().data());
  state.SetItemsProcessed(state.iterations() * 8 * 16 * 16 * c * 4 * c);
}
BENCHMARK(BM_ChannelLinear)->Arg(24)->Arg(48)->Arg(96);

void BM_DepthwiseConv7(benchmark::State& state) {
  const std::int64_t c = state.range(0), hw = 64 / (c / 24);
  auto x = uniform(Shape{8, c, hw, hw}, 1);
  auto w = uniform(Shape{c, 1, 7, 7}, 2);
  auto b = uniform(Shape{c}, 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::conv2d(x, w, b, {.stride = 1, .padding = 3, .groups = static_cast<int>(c)}).data().data());
  }
}
BENCHMARK(BM_DepthwiseConv7)->Arg(24)->Arg(48)->Arg(96);

void BM_DepthwiseConv7Backward(benchmark::State& state) {
  const std::int64_t c = 48;
  auto x = uniform(Shape{8, c, 32, 32}, 1, true);
  auto w = uniform(Shape{c, 1, 7, 7}, 2, true);
  auto b = uniform(Shape{c}, 3, true);
  for (auto _ : state) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto y = ops::sum_all(ops::conv2d(x, w, b, {.stride = 1, .padding = 3, .groups = static_cast<int>(c)}));
    tape.backward(y);
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_DepthwiseConv7Backward);

void BM_LayerNormChannels(benchmark::State& state) {
  auto x = uniform(Shape{8, 48, 32, 32}, 1);
  auto g = uniform(Shape{48}, 2), b = uniform(Shape{48}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(ops::layer_norm(x, 1, g, b).data().data());
}
BENCHMARK(BM_LayerNormChannels);

void BM_Gelu(benchmark::State& state) {
  auto x = uniform(Shape{8, 96, 32, 32}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(ops::gelu(x).data().data());
  state.SetItemsProcessed(state.iterations() * x.numel());
}
BENCHMARK(BM_Gelu);

void BM_PixelShuffle(benchmark::State& state) {
  const int r = static_cast<int>(state.range(0));
  auto x = uniform(Shape{8, 24 * r * r, 64 / r, 64 / r}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(ops::pixel_shuffle(x, r).data().data());
}
BENCHMARK(BM_PixelShuffle)->Arg(2)->Arg(4)->Arg(8);

void BM_ResizeBilinear(benchmark::State& state) {
  auto x = uniform(Shape{8, 4, 16, 16}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(ops::resize_bilinear(x, 64, 64).data().data());
}
BENCHMARK(BM_ResizeBilinear);

}  // namespace
