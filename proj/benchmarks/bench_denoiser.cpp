#include <benchmark/benchmark.h>

#include "orthodiff/pretrain.hpp"
#include "orthodiff/schedule.hpp"

using namespace orthodiff;

static void BM_DenoiserForward(benchmark::State& state) {
  torch::NoGradGuard no_grad;
  const auto cfg = DenoiserConfig::desk();
  auto model = make_denoiser(cfg, 0);
  model->eval();
  const auto b = state.range(0);
  const auto x = torch::randn({b, 1, cfg.input.depth, cfg.input.height, cfg.input.width});
  const auto t = torch::full({b}, 100, torch::kInt64);
  for (auto _ : state) benchmark::DoNotOptimize(model->forward(x, t));
  state.SetItemsProcessed(state.iterations() * b);
}
BENCHMARK(BM_DenoiserForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_DenoisingStep(benchmark::State& state) {
  const auto cfg = DenoiserConfig::desk();
  auto model = make_denoiser(cfg, 0);
  const auto sched = build_schedule(1000);
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(1e-4));
  const auto x0 = torch::randn({8, 1, cfg.input.depth, cfg.input.height, cfg.input.width});
  const auto t = torch::randint(0, 1000, {8}, torch::kInt64);
  const auto eps = torch::randn_like(x0);
  for (auto _ : state) {
    auto loss = denoising_loss(model, x0, t, eps, sched);
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
}
BENCHMARK(BM_DenoisingStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
