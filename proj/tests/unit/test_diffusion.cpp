#include <cmath>

#include "testing.hpp"
#include "orthodiff/errors.hpp"
#include "orthodiff/feature_tap.hpp"
#include "orthodiff/pretrain.hpp"
#include "orthodiff/schedule.hpp"
#include "orthodiff/synth.hpp"

using namespace orthodiff;

namespace {

DatasetIndex tiny_dataset(std::uint64_t seed = 1) {
  PhantomSpec s;
  s.n_patients = 10;
  s.seed = seed;
  return generate_dataset(s);
}

PretrainConfig quick(std::int64_t steps, std::uint64_t seed = 0) {
  PretrainConfig c;
  c.steps = steps;
  c.batch_size = 4;
  c.seed = seed;
  return c;
}

std::string checksum(UNet3D model) { return parameter_checksum(*model); }

}  // namespace

TEST_SUITE("diffusion_core") {

TEST_CASE("schedule examples") {
  const auto one = build_schedule(1, 0.1, 0.1);
  REQUIRE(one.alpha_bar.size() == 1);
  CHECK(one.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-15));

  const auto s = build_schedule(1000, 1e-4, 0.02);
  CHECK(s.alpha_bar[0] == doctest::Approx(0.9999).epsilon(1e-15));
  CHECK(s.beta.front() == 1e-4);
  CHECK(s.beta.back() == doctest::Approx(0.02));
  double prod = 1.0;
  for (std::size_t t = 0; t < s.beta.size(); ++t) {
    prod *= 1.0 - s.beta[t];
    REQUIRE(s.alpha_bar[t] == doctest::Approx(prod).epsilon(1e-12));
    if (t > 0) REQUIRE(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  }
  CHECK_THROWS_AS(build_schedule(0), ValidationError);
}

TEST_CASE("forward_noise limits") {
  torch::manual_seed(0);
  const auto x0 = torch::rand({1, 8, 32, 32}, torch::kFloat64) + 0.5;
  const auto eps = torch::randn_like(x0);
  const auto s = build_schedule(1000, 1e-6, 0.02);
  const auto near = forward_noise(x0, 0, eps, s);
  CHECK(((near - x0).abs() / x0.abs()).max().item<double>() < 1e-2);

  const auto sched = build_schedule(1000);
  const auto z = forward_noise(torch::zeros_like(x0), 500, eps, sched);
  CHECK(torch::equal(z, eps * std::sqrt(1.0 - sched.alpha_bar[500])));
  CHECK_THROWS_AS(forward_noise(x0, 5, eps.narrow(1, 0, 4), sched), ShapeError);
}

TEST_CASE("forward_noise marginal statistics") {
  const auto sched = build_schedule(1000);
  torch::manual_seed(1);
  const auto x0 = torch::full({1}, 0.7, torch::kFloat64);
  const std::int64_t n = 200000;
  for (std::int64_t t : {0, 137, 420, 777, 999}) {
    const auto eps = torch::randn({n}, torch::kFloat64);
    const auto xt = forward_noise(x0.expand({n}), t, eps, sched);
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double var = 1.0 - ab;
    const double mean_se = std::sqrt(var / n);
    const double var_se = var * std::sqrt(2.0 / (n - 1));
    CHECK(std::abs(xt.mean().item<double>() - std::sqrt(ab) * 0.7) < 3 * mean_se);
    CHECK(std::abs(xt.var().item<double>() - var) < 3 * var_se);
  }
}

TEST_CASE("denoiser shape and determinism") {
  auto model = make_denoiser(DenoiserConfig::desk(), 4);
  model->eval();
  torch::NoGradGuard g;
  const auto x = torch::randn({1, 1, 8, 32, 32});
  const auto t = torch::full({1}, 10, torch::kInt64);
  const auto a = model->forward(x, t);
  const auto b = model->forward(x, t);
  CHECK(a.sizes() == x.sizes());
  CHECK(torch::equal(a, b));
  CHECK(torch::equal(make_denoiser(DenoiserConfig::desk(), 4)->forward(x, t), a));
  CHECK_THROWS_AS(model->forward(torch::randn({1, 1, 4, 32, 32}), t), ShapeError);
  auto bad = x.clone();
  bad[0][0][0][0][0] = std::nan("");
  CHECK_THROWS_AS(model->forward(bad, t), NumericError);

  auto cfg = DenoiserConfig::desk();
  cfg.input = Resolution{4, 16, 16};
  auto small = make_denoiser(cfg, 0);
  const std::vector<std::int64_t> shape{2, 1, 4, 16, 16};
  CHECK(small->forward(torch::randn(shape), torch::zeros({2}, torch::kInt64)).sizes() == shape);
}

TEST_CASE("zero-output hook gives unit loss") {
  const auto ds = tiny_dataset();
  auto arch = DenoiserConfig::desk();
  auto model = make_denoiser(arch, 0);
  model->set_zero_output(true);
  auto cfg = quick(40);
  cfg.batch_size = 8;
  const auto r = pretrain(ds, Orientation::kSagittal, cfg, build_schedule(1000), arch, model);
  double mean = 0;
  for (const auto& p : r.loss_curve) mean += p.loss;
  mean /= static_cast<double>(r.loss_curve.size());
  // 40 * 8 * 8192 unit-variance squares: standard error about 2e-3.
  CHECK(std::abs(mean - 1.0) < 0.01);
}

TEST_CASE("pretraining is deterministic") {
  const auto ds = tiny_dataset();
  const auto sched = build_schedule(1000);
  const auto a = pretrain(ds, Orientation::kCoronal, quick(3), sched, DenoiserConfig::desk());
  const auto b = pretrain(ds, Orientation::kCoronal, quick(3), sched, DenoiserConfig::desk());
  CHECK(a.loss_curve.back().loss == b.loss_curve.back().loss);
  CHECK(checksum(a.model) == checksum(b.model));
}

TEST_CASE("orientations train independently") {
  const auto ds = tiny_dataset();
  // Same coronal/axial volumes, perturbed sagittal volumes.
  auto records = ds.all_records();
  for (auto& [pid, rec] : records) {
    for (auto& scan : rec.scans[Orientation::kSagittal]) scan.volume.data = scan.volume.data * 0.5;
  }
  const DatasetIndex perturbed(ds.splits(), records, ds.seed());
  const auto sched = build_schedule(1000);
  for (auto o : {Orientation::kCoronal, Orientation::kAxial}) {
    const auto a = pretrain(ds, o, quick(2), sched, DenoiserConfig::desk());
    const auto b = pretrain(perturbed, o, quick(2), sched, DenoiserConfig::desk());
    CHECK(checksum(a.model) == checksum(b.model));
  }
  const auto sa = pretrain(ds, Orientation::kSagittal, quick(2), sched, DenoiserConfig::desk());
  const auto sb = pretrain(perturbed, Orientation::kSagittal, quick(2), sched, DenoiserConfig::desk());
  CHECK(checksum(sa.model) != checksum(sb.model));
}

TEST_CASE("loss ignores sample order within a batch") {
  auto model = make_denoiser(DenoiserConfig::desk(), 2);
  model->eval();
  torch::NoGradGuard g;
  const auto sched = build_schedule(1000);
  const auto x0 = torch::randn({4, 1, 8, 32, 32});
  const auto eps = torch::randn_like(x0);
  const auto t = torch::tensor({3, 70, 400, 999}, torch::kInt64);
  const auto perm = torch::tensor({2, 0, 3, 1}, torch::kInt64);
  const double a = denoising_loss(model, x0, t, eps, sched).item<double>();
  const double b = denoising_loss(model, x0.index_select(0, perm), t.index_select(0, perm),
                                  eps.index_select(0, perm), sched).item<double>();
  CHECK(a == doctest::Approx(b).epsilon(1e-6));
}

TEST_CASE("loss curve csv") {
  const auto csv = loss_curve_csv({{0, 1.5}, {1, 1.25}});
  CHECK(csv.rfind("step,loss\n", 0) == 0);
}

}  // TEST_SUITE
