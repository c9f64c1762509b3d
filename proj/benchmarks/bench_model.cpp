#include <benchmark/benchmark.h>

#include "xnet/backbone.hpp"
#include "xnet/metrics.hpp"
#include "xnet/ops.hpp"
#include "xnet/rng.hpp"
#include "xnet/xnet_model.hpp"

using namespace xnet;

namespace {

ParamMap classifier(std::uint64_t seed) {
  Backbone net(BackboneConfig{}, seed);
  ParamMap out;
  for (const auto& [name, t] : net.params()) out.emplace(name, t.clone());
  return out;
}

Tensor images(std::int64_t n) {
  Rng rng(4);
  std::vector<float> v(static_cast<std::size_t>(n * 3 * 64 * 64));
  for (auto& x : v) x = static_cast<float>(rng.uniform(0.0, 1.0));
  return Tensor::from_data(Shape{n, 3, 64, 64}, std::move(v));
}

void BM_VariantForward(benchmark::State& state) {
  const Variant v = kAllVariants[static_cast<std::size_t>(state.range(0))];
  static const ParamMap enc = classifier(1), dec = classifier(2);
  auto model = build_variant(v, &enc, traits(v).pretrained_decoder ? &dec : nullptr, ModelConfig{}, 3).model;
  const auto x = images(8);
  for (auto _ : state) benchmark::DoNotOptimize(model.predict(x).data().data());
  state.SetLabel(to_string(v));
}
BENCHMARK(BM_VariantForward)->DenseRange(0, 6)->Unit(benchmark::kMillisecond);

void BM_XNetTrainStep(benchmark::State& state) {
  static const ParamMap enc = classifier(1), dec = classifier(2);
  ModelConfig mc;
  mc.task = Task::segmentation;
  auto model = build_variant(Variant::xnet, &enc, &dec, mc, 3).model;
  const auto x = images(8);
  std::vector<std::int32_t> labels(8 * 64 * 64, 1);
  for (auto _ : state) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto loss = ops::softmax_cross_entropy(model.forward(x).prediction, labels);
    tape.backward(loss);
    for (auto& [name, t] : model.params()) t.zero_grad();
  }
}
BENCHMARK(BM_XNetTrainStep)->Unit(benchmark::kMillisecond);

void BM_DepthMetrics(benchmark::State& state) {
  Rng rng(5);
  std::vector<float> p(64 * 64 * 50), g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = static_cast<float>(rng.uniform(0.5, 10.0));
    g[i] = static_cast<float>(rng.uniform(1.0, 10.0));
  }
  for (auto _ : state) benchmark::DoNotOptimize(depth_metrics(p, g));
}
BENCHMARK(BM_DepthMetrics);

}  // namespace

BENCHMARK_MAIN();
