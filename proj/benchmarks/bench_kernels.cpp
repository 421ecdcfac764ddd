#include <benchmark/benchmark.h>

#include "bench_common.hpp"
#include "promptct/kernels.hpp"

namespace {

using namespace promptct;
using namespace promptct::kernels;

void BM_Conv2d(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto stride = static_cast<std::size_t>(state.range(1));
  const Tensor x = bench::gaussian({16, n, n}, 1);
  const Tensor k = bench::gaussian({16, 16, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, stride));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(16 * 16 * 9 * n * n / (stride * stride)));
}
BENCHMARK(BM_Conv2d)->Args({64, 1})->Args({64, 2})->Args({128, 1});

void BM_Conv2dAdjoint(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor g = bench::gaussian({16, n, n}, 3);
  const Tensor k = bench::gaussian({16, 16, 3, 3}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_adjoint(g, k));
}
BENCHMARK(BM_Conv2dAdjoint)->Arg(64);

void BM_Conv2dKernelGrad(benchmark::State& state) {
  const Tensor x = bench::gaussian({16, 64, 64}, 5);
  const Tensor g = bench::gaussian({16, 64, 64}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_kernel_grad(x, g, 3));
}
BENCHMARK(BM_Conv2dKernelGrad);

void BM_SoftThreshold(benchmark::State& state) {
  const Tensor u = bench::gaussian({16, 64, 64}, 7);
  const Tensor e(u.dims(), 0.3);
  for (auto _ : state) benchmark::DoNotOptimize(soft_threshold(u, e));
}
BENCHMARK(BM_SoftThreshold);

void BM_Dft2(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor x = bench::gaussian({n, n}, 8);
  for (auto _ : state) benchmark::DoNotOptimize(idft2(dft2(x)));
}
BENCHMARK(BM_Dft2)->Arg(64)->Arg(128);

}  // namespace
