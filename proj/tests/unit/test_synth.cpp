#include <set>

#include "testing.hpp"
#include "oracles.hpp"
#include "orthodiff/dataset_io.hpp"
#include "orthodiff/errors.hpp"
#include "orthodiff/synth.hpp"

using namespace orthodiff;

namespace {

PhantomSpec small_spec(std::int64_t n = 16, std::uint64_t seed = 3) {
  PhantomSpec s;
  s.n_patients = n;
  s.seed = seed;
  return s;
}

double region_mean(const torch::Tensor& volume, const torch::Tensor& region) {
  return volume.squeeze(0).masked_select(region).mean().item<double>();
}

StudyRecord with_scan_counts(int sag, int cor, int ax) {
  StudyRecord r;
  r.patient_id = "p";
  const std::array<int, 3> counts{sag, cor, ax};
  for (auto o : kOrientations) {
    auto& list = r.scans[o];
    for (int i = 0; i < counts[index_of(o)]; ++i) {
      Scan s;
      s.volume.scan_id = std::string(to_string(o)) + std::to_string(i);
      list.push_back(s);
    }
  }
  return r;
}

}  // namespace

TEST_SUITE("synth_data") {

TEST_CASE("all-negative phantom keeps anatomy only") {
  const auto spec = small_spec();
  const auto rec = generate_phantom_study(spec, "p0001", std::vector<std::uint8_t>(4, 0));
  CHECK(rec.labels == std::vector<std::uint8_t>(4, 0));
  // Axial scans carry no segmentation masks.
  CHECK_FALSE(rec.scans_in(Orientation::kAxial).front().mask.has_value());
  for (auto o : {Orientation::kSagittal, Orientation::kCoronal}) {
    for (const auto& scan : rec.scans_in(o)) {
      REQUIRE(scan.mask.has_value());
      CHECK(scan.mask->classes.count_nonzero().item<std::int64_t>() > 0);
    }
  }
}

TEST_CASE("generation is deterministic") {
  const auto spec = small_spec();
  const auto a = generate_phantom_study(spec, "p0007");
  const auto b = generate_phantom_study(spec, "p0007");
  CHECK(a.labels == b.labels);
  for (auto o : kOrientations) {
    REQUIRE(a.scans_in(o).size() == b.scans_in(o).size());
    for (std::size_t i = 0; i < a.scans_in(o).size(); ++i) {
      CHECK(torch::equal(a.scans_in(o)[i].volume.data, b.scans_in(o)[i].volume.data));
      if (a.scans_in(o)[i].mask) CHECK(torch::equal(a.scans_in(o)[i].mask->classes, b.scans_in(o)[i].mask->classes));
    }
  }
  CHECK(index_json(generate_dataset(spec)) == index_json(generate_dataset(spec)));
}

TEST_CASE("a positive label brightens its lesion region") {
  const auto spec = small_spec();
  const std::string pid = "p0003";
  const auto site = lesion_site(1);
  const auto region = lesion_region(spec, pid, 1, site.preferred);
  REQUIRE(region.any().item<bool>());
  const auto on = generate_phantom_study(spec, pid, {0, 1, 0, 0});
  const auto off = generate_phantom_study(spec, pid, {0, 0, 0, 0});
  const auto& v_on = on.scans_in(site.preferred).front().volume.data;
  const auto& v_off = off.scans_in(site.preferred).front().volume.data;
  const double outside_on = v_on.squeeze(0).masked_select(region.logical_not()).mean().item<double>();
  CHECK(region_mean(v_on, region) - region_mean(v_off, region) > 0.1);
  CHECK(region_mean(v_on, region) > outside_on + 0.1);
}

TEST_CASE("labels are learnable from lesion-region means") {
  // Least-squares probe on lesion-region means. Each region is paired with the same region
  // in a label-free twin that shares anatomy and acquisition noise.
  const auto spec = small_spec(96, 5);
  const auto ds = generate_dataset(spec);
  const auto n = static_cast<std::int64_t>(ds.all_records().size());
  const std::vector<std::uint8_t> none(static_cast<std::size_t>(spec.n_labels), 0);
  auto design = torch::ones({n, 2 * spec.n_labels + 1}, torch::kFloat64);
  auto targets = torch::zeros({n, spec.n_labels}, torch::kFloat64);
  std::int64_t row = 0;
  for (const auto& [pid, rec] : ds.all_records()) {
    const auto twin = generate_phantom_study(spec, pid, none);
    for (int j = 0; j < spec.n_labels; ++j) {
      const auto o = lesion_site(j).preferred;
      const auto region = lesion_region(spec, pid, j, o);
      design[row][2 * j + 1] = region_mean(rec.scans_in(o).front().volume.data, region);
      design[row][2 * j + 2] = region_mean(twin.scans_in(o).front().volume.data, region);
      targets[row][j] = rec.labels[static_cast<std::size_t>(j)];
    }
    ++row;
  }
  const auto coef = std::get<0>(torch::linalg_lstsq(design, targets));
  const auto fitted = design.matmul(coef);
  for (int k = 0; k < spec.n_labels; ++k) {
    std::vector<double> score;
    std::vector<std::uint8_t> truth;
    for (std::int64_t i = 0; i < n; ++i) {
      score.push_back(fitted[i][k].item<double>());
      truth.push_back(static_cast<std::uint8_t>(targets[i][k].item<double>()));
    }
    const auto auc = oracle::auroc_pairs(score, truth);
    REQUIRE(auc.has_value());
    INFO("label " << k);
    CHECK(*auc > 0.9);
  }
}

TEST_CASE("preprocess examples") {
  const Resolution r{16, 4, 4};
  auto raw = torch::linspace(0, 100, 20 * 16, torch::kFloat64).reshape({1, 20, 4, 4});
  const auto v = preprocess_volume(raw, r);
  CHECK(v.data.min().item<double>() == -1.0);
  CHECK(v.data.max().item<double>() == 1.0);

  const auto flat = preprocess_volume(torch::full({1, 16, 4, 4}, 7.0), r);
  CHECK(flat.data.abs().max().item<double>() == 0.0);

  // Slice i holds the value i, so the retained window is visible after rescaling.
  auto slices = torch::arange(20, torch::kFloat64).reshape({1, 20, 1, 1}).expand({1, 20, 4, 4}).contiguous();
  const auto window = preprocess_volume(slices, r).data.to(torch::kFloat64);
  const auto expected = (torch::arange(2, 18, torch::kFloat64) - 2) / 15.0 * 2.0 - 1.0;
  CHECK(torch::allclose(window[0].select(1, 0).select(1, 0), expected, 0, 1e-6));

  CHECK_THROWS_AS(preprocess_volume(torch::zeros({1, 15, 4, 4}), r), ShapeError);
}

TEST_CASE("preprocessed volumes stay in [-1, 1]") {
  torch::manual_seed(11);
  for (int i = 0; i < 1000; ++i) {
    const auto scale = torch::rand({1}).item<double>() * 1000.0;
    auto raw = torch::randn({1, 10, 6, 6}, torch::kFloat64) * scale + scale;
    const auto v = preprocess_volume(raw, Resolution{8, 6, 6}).data;
    REQUIRE(v.min().item<double>() >= -1.0);
    REQUIRE(v.max().item<double>() <= 1.0);
  }
  const auto ds = generate_dataset(small_spec(32, 9));
  for (const auto& [pid, rec] : ds.all_records()) {
    for (auto o : kOrientations) {
      for (const auto& scan : rec.scans_in(o)) {
        CHECK(scan.volume.data.abs().max().item<double>() <= 1.0);
      }
    }
  }
}

TEST_CASE("split_by_patient") {
  std::vector<StudyRecord> recs;
  for (int i = 0; i < 10; ++i) {
    StudyRecord r;
    r.patient_id = "p" + std::to_string(i);
    recs.push_back(r);
  }
  const auto a = split_by_patient(recs, {0.8, 0.1, 0.1}, 4);
  CHECK(a.patient_ids(Split::kTrain).size() == 8);
  CHECK(a.patient_ids(Split::kVal).size() == 1);
  CHECK(a.patient_ids(Split::kTest).size() == 1);
  const auto b = split_by_patient(recs, {0.8, 0.1, 0.1}, 4);
  CHECK((a.splits() == b.splits()));
  CHECK_THROWS_AS(split_by_patient({}, {0.8, 0.1, 0.1}, 4), ValidationError);
}

TEST_CASE("splits never share a patient") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto ds = generate_dataset(small_spec(40, seed));
    std::set<std::string> seen;
    std::size_t total = 0;
    for (auto s : {Split::kTrain, Split::kVal, Split::kTest}) {
      for (const auto& id : ds.patient_ids(s)) {
        CHECK(seen.insert(id).second);
        ++total;
      }
    }
    CHECK(total == ds.all_records().size());
  }
}

TEST_CASE("fusion tuples") {
  auto one = enumerate_fusion_samples(with_scan_counts(1, 1, 1));
  REQUIRE(one.has_value());
  CHECK(one->size() == 1);
  CHECK(one->front().weight == 1.0);

  auto two = enumerate_fusion_samples(with_scan_counts(2, 1, 1));
  REQUIRE(two.has_value());
  CHECK(two->size() == 2);
  for (const auto& t : *two) CHECK(t.weight == 0.5);

  auto full = enumerate_fusion_samples(with_scan_counts(4, 4, 4));
  REQUIRE(full.has_value());
  CHECK(full->size() == 64);
  for (const auto& t : *full) CHECK(t.weight == 1.0 / 64);

  CHECK_FALSE(enumerate_fusion_samples(with_scan_counts(1, 0, 2)).has_value());

  for (int s = 1; s <= 4; ++s) {
    for (int c = 1; c <= 4; ++c) {
      for (int a = 1; a <= 4; ++a) {
        const auto tuples = enumerate_fusion_samples(with_scan_counts(s, c, a));
        double sum = 0;
        for (const auto& t : *tuples) sum += t.weight;
        CHECK(tuples->size() == static_cast<std::size_t>(s * c * a));
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("spec bounds") {
  auto s = small_spec();
  s.multi_scan_fraction = 0.6;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = small_spec();
  s.n_patients = 0;
  CHECK_THROWS_AS(generate_phantom_study(s, "p"), ValidationError);
}

}  // TEST_SUITE
