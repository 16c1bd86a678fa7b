#include "testing.hpp"
#include "orthodiff/errors.hpp"
#include "orthodiff/feature_tap.hpp"
#include "orthodiff/pretrain.hpp"
#include "orthodiff/synth.hpp"

using namespace orthodiff;

namespace {

VolumeTensor volume(std::uint64_t seed) {
  torch::manual_seed(seed);
  VolumeTensor v;
  v.data = torch::rand({1, 8, 32, 32}) * 2 - 1;
  v.scan_id = "s" + std::to_string(seed);
  return v;
}

}  // namespace

TEST_SUITE("feature_tap") {

TEST_CASE("tap parsing and grid") {
  const auto tap = TapPoint::parse("t50:mid_2");
  CHECK(tap.timestep == 50);
  CHECK(tap.block == BottleneckBlock::kMid2);
  CHECK(tap.str() == "t50:mid_2");
  CHECK_THROWS_AS(TapPoint::parse("50:mid_2"), ValidationError);
  CHECK_THROWS_AS(TapPoint::parse("t50:mid_7"), std::exception);
  CHECK(tap_grid(paper_timestep_grid()).size() == 24);
}

TEST_CASE("desk and paper bottleneck shapes") {
  const auto desk = DenoiserConfig::desk().bottleneck_shape();
  const std::array<std::int64_t, 4> desk_want{16 * 2, 2, 8, 8}, paper_want{256, 1, 16, 16};
  CHECK(desk == desk_want);
  CHECK(DenoiserConfig::paper().bottleneck_shape() == paper_want);

  auto model = make_denoiser(DenoiserConfig::desk(), 1);
  const auto sched = build_schedule(1000);
  const auto fm = extract_features(model, volume(1), TapPoint{50, BottleneckBlock::kMid0}, sched, 0);
  const std::vector<std::int64_t> want{32, 2, 8, 8};
  CHECK(fm.data.sizes() == want);
}

TEST_CASE("features are deterministic per noise seed") {
  auto model = make_denoiser(DenoiserConfig::desk(), 1);
  const auto sched = build_schedule(1000);
  const auto x = volume(2);
  const TapPoint tap{100, BottleneckBlock::kMid1};
  const auto a = extract_features(model, x, tap, sched, 5);
  const auto b = extract_features(model, x, tap, sched, 5);
  const auto c = extract_features(model, x, tap, sched, 6);
  CHECK(torch::equal(a.data, b.data));
  CHECK_FALSE(torch::equal(a.data, c.data));
  CHECK_THROWS_AS(extract_features(model, x, TapPoint{1000, BottleneckBlock::kMid0}, sched, 5),
                  ValidationError);
}

TEST_CASE("blocks differ and extraction leaves parameters untouched") {
  PhantomSpec spec;
  spec.n_patients = 8;
  const auto ds = generate_dataset(spec);
  PretrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 4;
  const auto sched = build_schedule(1000);
  auto model = pretrain(ds, Orientation::kSagittal, cfg, sched, DenoiserConfig::desk()).model;
  const auto before = parameter_checksum(*model);
  const auto x = volume(3);
  std::vector<torch::Tensor> maps;
  for (auto b : {BottleneckBlock::kMid0, BottleneckBlock::kMid1, BottleneckBlock::kMid2}) {
    maps.push_back(extract_features(model, x, TapPoint{50, b}, sched, 0).data);
  }
  CHECK(parameter_checksum(*model) == before);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = i + 1; j < 3; ++j) CHECK((maps[i] - maps[j]).abs().max().item<double>() > 0);
  }
}

TEST_CASE("feature cache round trip") {
  const auto root = std::filesystem::temp_directory_path() / "orthodiff_feature_cache_test";
  std::filesystem::remove_all(root);
  FeatureCache cache(root, "abc", 3);
  FeatureMap fm;
  fm.data = torch::randn({32, 2, 8, 8});
  fm.tap = TapPoint{50, BottleneckBlock::kMid2};
  fm.orientation = Orientation::kAxial;
  fm.scan_id = "p1_ax0";
  CHECK_FALSE(cache.load(fm.scan_id, fm.tap, fm.orientation).has_value());
  cache.store(fm);
  const auto back = cache.load(fm.scan_id, fm.tap, fm.orientation);
  REQUIRE(back.has_value());
  CHECK(torch::equal(back->data, fm.data));
  std::filesystem::remove_all(root);
}

}  // TEST_SUITE
