#include <benchmark/benchmark.h>

#include "kml/autodiff.hpp"
#include "kml/metalearn.hpp"

namespace {

using namespace kml;

Tensor filled(Shape shape, std::uint64_t seed) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  Philox g(seed, StreamDomain::evaluation, 0);
  std::vector<double> v(n);
  for (double& x : v) x = g.normal();
  return Tensor::from_values(std::move(shape), std::move(v));
}

void BM_Conv2dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Tensor x = filled({8, c, 16, 16}, 1), w = filled({c, c, 3, 3}, 2);
  NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, {1, 1}));
}
BENCHMARK(BM_Conv2dForward)->Arg(8)->Arg(16)->Arg(32);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Tensor x = filled({8, c, 16, 16}, 1), w = filled({c, c, 3, 3}, 2).as_parameter();
  for (auto _ : state) benchmark::DoNotOptimize(grad(sum(conv2d(x, w, {1, 1})), w));
}
BENCHMARK(BM_Conv2dBackward)->Arg(8)->Arg(16);

ModeSpec image_mode(ModeKind kind) {
  ModeSpec m;
  m.kind = kind;
  m.weight = 0.5;
  return m;
}

void BM_SampleEpisode(benchmark::State& state) {
  TaskDistribution dist({image_mode(ModeKind::glyph), image_mode(ModeKind::texture)}, 1);
  std::uint64_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(sample_episode(dist, {5, 1, 15}, Split::train, 9, i++));
}
BENCHMARK(BM_SampleEpisode);

void BM_TrainStep(benchmark::State& state) {
  MetaLearnerConfig cfg;
  cfg.kind = state.range(0) == 0 ? LearnerKind::protonet : LearnerKind::maml;
  cfg.inner_steps = cfg.kind == LearnerKind::maml ? 1 : 0;
  cfg.modulation = state.range(1) == 0 ? ModulationKind::none : ModulationKind::kml;
  cfg.meta_batch = 4;
  cfg.d_upsilon = 32;
  cfg.episode = {5, 1, 5};
  TaskDistribution dist({image_mode(ModeKind::glyph), image_mode(ModeKind::texture)}, 1);
  const Architecture arch = resolve_architecture(cfg, dist.sample_shape());
  TrainState s = init_train_state(cfg, arch);
  const std::vector<TaskInstance> batch = draw_meta_batch(s, dist, cfg);
  for (auto _ : state) benchmark::DoNotOptimize(meta_train_step(s, batch, cfg, arch));
}
BENCHMARK(BM_TrainStep)
    ->Args({0, 0})
    ->Args({0, 1})
    ->Args({1, 0})
    ->Args({1, 1})
    ->ArgNames({"maml", "kml"})
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
