#include <benchmark/benchmark.h>

#include "bench_common.hpp"
#include "promptct/simulate.hpp"

namespace {

using namespace promptct;

void BM_BuildOperator(benchmark::State& state) {
  const auto g = bench::desk_geometry();
  const auto views = subsample_views(g.n_views_full, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(build_operator(g, views));
}
BENCHMARK(BM_BuildOperator)->Arg(60)->Arg(180)->Unit(benchmark::kMillisecond);

void BM_Project(benchmark::State& state) {
  const auto g = bench::desk_geometry();
  const auto op = build_operator(g, subsample_views(g.n_views_full, static_cast<std::size_t>(state.range(0))));
  const Tensor x = shepp_logan(g.image_size).image;
  for (auto _ : state) benchmark::DoNotOptimize(project(op, x));
  state.counters["nnz"] = static_cast<double>(op.nnz());
}
BENCHMARK(BM_Project)->Arg(60)->Arg(180);

void BM_Backproject(benchmark::State& state) {
  const auto g = bench::desk_geometry();
  const auto op = build_operator(g, subsample_views(g.n_views_full, static_cast<std::size_t>(state.range(0))));
  const Tensor y = project(op, shepp_logan(g.image_size).image);
  for (auto _ : state) benchmark::DoNotOptimize(backproject(op, y));
}
BENCHMARK(BM_Backproject)->Arg(60)->Arg(180);

void BM_Fbp(benchmark::State& state) {
  const auto g = bench::desk_geometry();
  const auto views = subsample_views(g.n_views_full, static_cast<std::size_t>(state.range(0)));
  const Tensor y = project(build_operator(g, views), shepp_logan(g.image_size).image);
  for (auto _ : state) benchmark::DoNotOptimize(fbp(y, g, views));
}
BENCHMARK(BM_Fbp)->Arg(60)->Arg(180);

void BM_EstimateZeta(benchmark::State& state) {
  const auto g = bench::desk_geometry();
  const auto op = build_operator(g, subsample_views(g.n_views_full, 60));
  for (auto _ : state) benchmark::DoNotOptimize(estimate_zeta(op, 100, 0x5eed));
}
BENCHMARK(BM_EstimateZeta)->Unit(benchmark::kMillisecond);

void BM_RandomPhantom(benchmark::State& state) {
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(random_ellipse_phantom(64, ++seed));
}
BENCHMARK(BM_RandomPhantom);

}  // namespace
