#include <benchmark/benchmark.h>

#include <random>

#include "orthodiff/metrics.hpp"

using namespace orthodiff;

static void BM_Auroc(benchmark::State& state) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  metrics::ScoredLabels s;
  for (std::int64_t i = 0; i < state.range(0); ++i) {
    s.scores.push_back(u(rng));
    s.truth.push_back(u(rng) < 0.4 ? 1 : 0);
  }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::auroc(s));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Auroc)->RangeMultiplier(8)->Range(64, 32768)->Complexity(benchmark::oNLogN);

static void BM_PermutationTest(benchmark::State& state) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.1, 1.0);
  std::vector<double> diffs(static_cast<std::size_t>(state.range(0)));
  for (auto& d : diffs) d = n(rng);
  for (auto _ : state) benchmark::DoNotOptimize(metrics::permutation_test(diffs, 10000, 0));
}
BENCHMARK(BM_PermutationTest)->Arg(12)->Arg(64);
