#include <benchmark/benchmark.h>

#include "bench_common.hpp"
#include "promptct/reconstructor.hpp"
#include "promptct/simulate.hpp"

namespace {

using namespace promptct;

UnfoldingConfig desk_model() {
  UnfoldingConfig cfg;
  cfg.geometry = bench::desk_geometry();
  cfg.lipnet.filters = 16;
  cfg.lipnet.hidden = 8;
  cfg.lipnet.prompt_channels = 8;
  cfg.lipnet.image_size = cfg.geometry.image_size;
  return cfg;
}

void BM_LipNetStage(benchmark::State& state) {
  const auto cfg = desk_model();
  ModelParams params = init_lipnet_params(cfg.lipnet, 1);
  const Tensor z0 = random_ellipse_phantom(cfg.geometry.image_size, 2).image;
  for (auto _ : state) benchmark::DoNotOptimize(lipnet_stage(params, cfg.lipnet, z0, z0, 0.05, nullptr));
}
BENCHMARK(BM_LipNetStage)->Unit(benchmark::kMillisecond);

void BM_Forward(benchmark::State& state) {
  const auto cfg = desk_model();
  Model model = make_model(cfg, 3);
  OperatorBank bank(cfg.geometry);
  const auto& g = cfg.geometry;
  const auto views = subsample_views(g.n_views_full, static_cast<std::size_t>(state.range(0)));
  const Tensor y = project(bank.get(views).op, random_ellipse_phantom(g.image_size, 4).image);
  const Tensor mask = make_mask(g.n_views_full, g.n_bins, views);
  for (auto _ : state) benchmark::DoNotOptimize(promptct_forward(model, y, mask, bank));
}
BENCHMARK(BM_Forward)->Arg(60)->Arg(180)->Unit(benchmark::kMillisecond);

}  // namespace
