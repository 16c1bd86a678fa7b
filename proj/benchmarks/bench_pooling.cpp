#include <benchmark/benchmark.h>

#include "orthodiff/pooling.hpp"

using namespace orthodiff;

namespace {

// Desk bottleneck: 32 channels over a 2x8x8 grid.
torch::Tensor bottleneck(std::int64_t batch) { return torch::randn({batch, 32, 2, 8, 8}); }

}  // namespace

static void BM_Pool(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  const auto method = static_cast<PoolingMethod>(state.range(0));
  PoolingModule pool(method, 32);
  const auto fm = bottleneck(8);
  for (auto _ : state) benchmark::DoNotOptimize(pool->forward(fm));
  state.SetLabel(std::string(to_string(method)));
}
BENCHMARK(BM_Pool)
    ->Arg(static_cast<int>(PoolingMethod::kGap))
    ->Arg(static_cast<int>(PoolingMethod::kGlp))
    ->Arg(static_cast<int>(PoolingMethod::kSap));
