#include <benchmark/benchmark.h>

#include "mtu/ops.hpp"
#include "mtu/rng.hpp"

namespace mtu {
namespace {
using namespace ops;

Tensor<float> randn(Shape shape, Rng& rng, bool grad = false) {
  const auto n = shape_numel(shape);
  auto v = normal_vector<float>(rng, n);
  return grad ? Tensor<float>::parameter(std::move(shape), std::move(v))
              : Tensor<float>::constant(std::move(shape), std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = randn({n, n}, rng), b = randn({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const auto a = randn({n, n}, rng, true), b = randn({n, n}, rng, true);
  for (auto _ : state) backward(sum(matmul(a, b)));
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(128);

// Shapes of the denoiser's input stem: 8 -> 32 channels on 24x24 images.
void BM_Conv2d(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const auto x = randn({batch, 8, 24, 24}, rng);
  const auto w = randn({32, 8, 3, 3}, rng), b = randn({32}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 1).data().data());
}
BENCHMARK(BM_Conv2d)->Arg(1)->Arg(16);

// 36 image tokens, width 128, 4 heads.
void BM_Attention(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  const auto q = randn({batch, 36, 128}, rng), k = randn({batch, 36, 128}, rng), v = randn({batch, 36, 128}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(attention(q, k, v, 4).data().data());
}
BENCHMARK(BM_Attention)->Arg(1)->Arg(16);

}  // namespace
}  // namespace mtu

BENCHMARK_MAIN();
