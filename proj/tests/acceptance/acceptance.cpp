// Acceptance gate. Each criterion prints one line:
//   criterion <n> PASS|FAIL <title> :: <details>
// and the process exits non-zero when any selected criterion fails.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "orthodiff/checkpoint.hpp"
#include "orthodiff/cli.hpp"
#include "orthodiff/fusion.hpp"
#include "orthodiff/metrics.hpp"
#include "orthodiff/pretrain.hpp"
#include "orthodiff/training.hpp"

namespace fs = std::filesystem;
using namespace orthodiff;
using Json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  std::vector<std::string> failures;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      failures.push_back(what);
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

// ---------------------------------------------------------------- 1: oracles

void criterion_oracles(Outcome& out) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20240601);
  std::uniform_int_distribution<int> level(0, 6);
  std::bernoulli_distribution coin(0.5);

  auto draw = [&](std::size_t n) {
    metrics::ScoredLabels s;
    for (std::size_t i = 0; i < n; ++i) {
      s.scores.push_back(level(rng) / 6.0);
      s.truth.push_back(coin(rng) ? 1 : 0);
    }
    return s;
  };

  std::size_t auc_cases = 0, auc_mismatch = 0;
  std::uniform_int_distribution<std::size_t> len12(2, 12);
  while (auc_cases < 200) {
    auto s = draw(len12(rng));
    const auto want = oracle::auroc_pairs(s.scores, s.truth);
    const auto got = metrics::auroc(s);
    if (want.has_value() != got.has_value()) {
      ++auc_mismatch;
      continue;
    }
    if (!want) continue;
    ++auc_cases;
    if (*got != *want) ++auc_mismatch;
  }
  out.require(auc_mismatch == 0, "auroc differs from pairwise counting");

  std::size_t ap_cases = 0, ap_mismatch = 0;
  std::uniform_int_distribution<std::size_t> len10(1, 10);
  while (ap_cases < 200) {
    auto s = draw(len10(rng));
    const auto want = oracle::ap_thresholds(s.scores, s.truth);
    const auto got = metrics::average_precision(s);
    if (want.has_value() != got.has_value()) {
      ++ap_mismatch;
      continue;
    }
    if (!want) continue;
    ++ap_cases;
    // Same threshold steps summed in a different order: allow rounding only.
    if (std::abs(*got - *want) > 1e-12) ++ap_mismatch;
  }
  out.require(ap_mismatch == 0, "average precision differs from threshold enumeration");

  std::size_t dice_mismatch = 0;
  std::uniform_int_distribution<int> cls(0, 4);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<std::uint8_t> p(64), g(64);
    for (auto& v : p) v = static_cast<std::uint8_t>(cls(rng));
    for (auto& v : g) v = static_cast<std::uint8_t>(cls(rng));
    for (std::uint8_t c = 0; c < 6; ++c) {
      if (metrics::dice(p, g, c) != oracle::dice_sets(p, g, c)) ++dice_mismatch;
    }
  }
  out.require(dice_mismatch == 0, "dice differs from set arithmetic");

  std::normal_distribution<double> normal(0.2, 1.0);
  double worst_z = 0.0;
  bool exact_ok = true;
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> d(10);
    for (auto& v : d) v = normal(rng);
    const auto exact = metrics::permutation_test(d, 1 << 10);
    exact_ok = exact_ok && exact.exact && std::abs(exact.p_value - oracle::sign_flip_exact(d)) < 1e-12;
    // Fewer resamples than 2^10 sign patterns forces the Monte-Carlo path.
    const std::uint64_t b = 1000;
    const auto mc = metrics::permutation_test(d, b, 1000 + static_cast<std::uint64_t>(rep));
    exact_ok = exact_ok && !mc.exact;
    const double se = std::sqrt(std::max(exact.p_value * (1 - exact.p_value), 1e-12) / static_cast<double>(b));
    // The Monte-Carlo estimate counts the observed assignment, a 1/(B+1) shift.
    const double shift = 1.0 / static_cast<double>(b + 1);
    worst_z = std::max(worst_z, (std::abs(mc.p_value - exact.p_value) - shift) / se);
  }
  out.require(exact_ok, "exact permutation p differs from enumeration oracle");
  out.require(worst_z <= 3.0, "Monte-Carlo permutation p outside 3 standard errors");

  const double secs = seconds_since(t0);
  out.require(secs < 60.0, "runtime over 1 min");
  out.detail << "auroc " << auc_cases << " cases, ap " << ap_cases << " cases, mismatches " << auc_mismatch << "/"
             << ap_mismatch << "/" << dice_mismatch << ", worst MC z " << worst_z << ", " << secs << "s";
}

// ---------------------------------------------------------------- 2: gradients

void criterion_gradients(Outcome& out) {
  const auto t0 = Clock::now();
  DenoiserConfig cfg;
  cfg.base_channels = 4;
  cfg.channel_multipliers = {1, 2};
  cfg.attention_resolution = 2;
  cfg.input = Resolution{4, 4, 4};
  auto model = make_denoiser(cfg, 17);
  model->to(torch::kFloat64);
  model->eval();

  torch::manual_seed(5);
  auto x = torch::randn({2, 1, 4, 4, 4}, torch::kFloat64).requires_grad_(true);
  const auto t = torch::tensor({3, 41}, torch::kInt64);
  const auto eps = torch::randn({2, 1, 4, 4, 4}, torch::kFloat64);
  const auto sched = build_schedule(1000);
  auto objective = [&]() { return denoising_loss(model, x, t, eps, sched); };

  for (auto& p : model->parameters()) p.mutable_grad() = torch::Tensor();
  objective().backward();

  const double h = 1e-6;
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  std::mt19937_64 rng(9);
  auto check_tensor = [&](torch::Tensor param, const torch::Tensor& grad, const std::string& name) {
    auto flat = param.detach().view({-1});
    auto gflat = grad.view({-1});
    const auto n = flat.size(0);
    std::vector<std::int64_t> picks;
    if (n <= 6) {
      for (std::int64_t i = 0; i < n; ++i) picks.push_back(i);
    } else {
      std::uniform_int_distribution<std::int64_t> pick(0, n - 1);
      for (int i = 0; i < 6; ++i) picks.push_back(pick(rng));
    }
    torch::NoGradGuard no_grad;
    for (auto i : picks) {
      const double orig = flat[i].item<double>();
      flat[i] = orig + h;
      const double up = objective().item<double>();
      flat[i] = orig - h;
      const double down = objective().item<double>();
      flat[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = gflat[i].item<double>();
      const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-3});
      const double rel = std::abs(numeric - analytic) / scale;
      if (rel > worst) {
        worst = rel;
        worst_name = name;
      }
      ++checked;
    }
  };
  for (const auto& p : model->named_parameters()) {
    if (!p.value().grad().defined()) continue;
    check_tensor(p.value(), p.value().grad(), p.key());
  }
  check_tensor(x, x.grad(), "input");

  const double secs = seconds_since(t0);
  out.require(worst < 1e-4, "max relative error " + std::to_string(worst) + " at " + worst_name);
  out.require(secs < 120.0, "runtime over 2 min");
  out.detail << checked << " entries, max relative error " << worst << " (" << worst_name << "), " << secs << "s";
}

// ---------------------------------------------------------------- 3: diffusion statistics

void criterion_diffusion(Outcome& out) {
  const auto t0 = Clock::now();
  const auto sched = build_schedule(kDefaultTimesteps);
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::int64_t> pick(0, sched.T - 1);
  torch::manual_seed(78);
  const std::int64_t n = 400000;
  const double x0 = -0.35;
  double worst = 0.0;
  std::ostringstream ts;
  for (int i = 0; i < 5; ++i) {
    const auto t = pick(rng);
    const auto eps = torch::randn({n}, torch::kFloat64);
    const auto xt = forward_noise(torch::full({n}, x0, torch::kFloat64), t, eps, sched);
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double var = 1.0 - ab;
    const double z_mean = std::abs(xt.mean().item<double>() - std::sqrt(ab) * x0) / std::sqrt(var / n);
    const double z_var = std::abs(xt.var().item<double>() - var) / (var * std::sqrt(2.0 / (n - 1)));
    worst = std::max({worst, z_mean, z_var});
    out.require(z_mean <= 3.0, "mean off at t=" + std::to_string(t));
    out.require(z_var <= 3.0, "variance off at t=" + std::to_string(t));
    ts << (i ? "," : "") << t;
  }
  const double secs = seconds_since(t0);
  out.require(secs < 60.0, "runtime over 1 min");
  out.detail << "t={" << ts.str() << "}, worst |z| " << worst << ", " << secs << "s";
}

// ---------------------------------------------------------------- 4: invariants

void criterion_invariants(Outcome& out) {
  const auto t0 = Clock::now();
  torch::manual_seed(404);
  std::size_t checks = 0;
  auto require = [&](bool ok, const std::string& what) {
    ++checks;
    out.require(ok, what);
  };

  // Pooling contracts.
  for (std::int64_t c : {16, 32, 64}) {
    const auto fm = torch::randn({3, c, 2, 4, 4}, torch::kFloat64);
    const auto h = std::max<std::int64_t>(1, c / 8);
    GlpParams g{torch::randn({h, c}, torch::kFloat64), torch::randn({h}, torch::kFloat64),
                torch::randn({1, h}, torch::kFloat64), torch::randn({1}, torch::kFloat64)};
    SapParams s{torch::randn({c, c}, torch::kFloat64) / std::sqrt(c), torch::randn({c, c}, torch::kFloat64) / std::sqrt(c),
                torch::randn({c, c}, torch::kFloat64), torch::randn({c, c}, torch::kFloat64)};
    torch::Tensor w, attn;
    require(gap_batch(fm).size(1) == c, "GAP width");
    require(glp_batch(fm, g, &w).size(1) == 2 * c, "GLP width");
    require(sap_batch(fm, s, default_sap_heads(c), &attn).size(1) == 2 * c, "SAP width");
    require(((w.sum(1) - 1).abs() < 1e-6).all().item<bool>() && (w >= 0).all().item<bool>(), "GLP softmax");
    require(((attn.sum(-1) - 1).abs() < 1e-6).all().item<bool>() && (attn >= 0).all().item<bool>(), "SAP softmax");
    const auto perm = torch::randperm(32, torch::kInt64);
    const auto shuffled = fm.reshape({3, c, 32}).index_select(2, perm).reshape(fm.sizes());
    require(torch::allclose(gap_batch(fm), gap_batch(shuffled), 0, 1e-13), "GAP permutation invariance");
  }

  // MPAE simplex, convexity and the equal-expert fixed point.
  MpaeGate gate(4);
  for (bool training : {true, false}) {
    gate->train(training);
    for (int rep = 0; rep < 20; ++rep) {
      ExpertLogits z{torch::randn({16, 3, 4}) * 4, ""};
      const auto a = mpae_gate(z, gate);
      require(((a.alpha.sum(1) - 1).abs() < 1e-6).all().item<bool>() && (a.alpha >= 0).all().item<bool>(),
              "MPAE simplex");
      const auto f = mpae_fuse(z, a);
      require((f >= std::get<0>(z.z.min(1)) - 1e-5).all().item<bool>() &&
                  (f <= std::get<0>(z.z.max(1)) + 1e-5).all().item<bool>(),
              "MPAE convexity");
      const auto same = torch::randn({16, 1, 4}).expand({16, 3, 4}).contiguous();
      require(torch::allclose(mpae_fuse({same, ""}, mpae_gate({same, ""}, gate)), same.select(1, 0), 0, 1e-5),
              "MPAE equal experts");
    }
  }

  // Late fusion convexity.
  for (int rep = 0; rep < 50; ++rep) {
    const auto zm = torch::randn({8, 4}) * 5, ze = torch::randn({8, 4}) * 5, w = torch::randn({4}) * 4;
    const auto f = late_fuse(zm, ze, w);
    require((f >= torch::minimum(zm, ze) - 1e-5).all().item<bool>() &&
                (f <= torch::maximum(zm, ze) + 1e-5).all().item<bool>(),
            "late fusion convexity");
  }

  // Tuple weights per patient, every multiplicity in {1..4}^3.
  for (int s = 1; s <= 4; ++s) {
    for (int c = 1; c <= 4; ++c) {
      for (int a = 1; a <= 4; ++a) {
        StudyRecord r;
        r.patient_id = "p";
        const std::array<int, 3> counts{s, c, a};
        for (auto o : kOrientations) {
          for (int i = 0; i < counts[index_of(o)]; ++i) {
            Scan scan;
            scan.volume.scan_id = std::string(to_string(o)) + std::to_string(i);
            r.scans[o].push_back(scan);
          }
        }
        const auto tuples = enumerate_fusion_samples(r);
        double sum = 0.0;
        for (const auto& t : *tuples) sum += t.weight;
        require(std::abs(sum - 1.0) < 1e-12, "tuple weights sum to one");
      }
    }
  }

  // Patient-level split disjointness.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    PhantomSpec spec;
    spec.n_patients = 50;
    spec.seed = seed;
    std::vector<StudyRecord> records;
    for (int i = 0; i < 50; ++i) {
      StudyRecord r;
      r.patient_id = "p" + std::to_string(i);
      records.push_back(r);
    }
    const auto idx = split_by_patient(records, {0.7, 0.15, 0.15}, seed);
    std::set<std::string> seen;
    bool disjoint = true;
    for (auto sp : {Split::kTrain, Split::kVal, Split::kTest}) {
      for (const auto& id : idx.patient_ids(sp)) disjoint = seen.insert(id).second && disjoint;
    }
    require(disjoint && seen.size() == 50, "split disjointness");
  }

  // Freeze contracts on a small phantom set.
  PhantomSpec spec;
  spec.n_patients = 24;
  spec.seed = 8;
  spec.multi_scan_fraction = 0.3;
  const auto ds = generate_dataset(spec);
  const auto sched = build_schedule(kDefaultTimesteps);
  auto backbone = make_denoiser(DenoiserConfig::desk(), 12);
  const auto original = parameter_checksum(*backbone);
  const TapPoint tap{50, BottleneckBlock::kMid2};
  TrainPlan lp;
  lp.stage = TrainStage::kStage1LP;
  lp.epochs = 1;
  std::array<Stage1Artifacts, 3> stage1;
  for (auto o : kOrientations) {
    stage1[index_of(o)] = train_stage1(ds, o, tap, ProbeSetting::kLinearProbe, lp, backbone, sched);
    const auto& a = stage1[index_of(o)];
    require(a.backbone_checksum_before == a.backbone_checksum_after, "LP backbone checksum");
  }
  require(parameter_checksum(*backbone) == original, "LP leaves the pretrained model untouched");

  TrainPlan ft = lp;
  ft.stage = TrainStage::kStage1FT;
  ft.backbone_lr = 1e-3;
  auto tuned = train_stage1(ds, Orientation::kSagittal, tap, ProbeSetting::kFineTune, ft, backbone, sched);
  std::vector<std::string> decoder, encoder;
  for (const auto& p : tuned.backbone->named_parameters()) {
    (UNet3DImpl::is_decoder_parameter(p.key()) ? decoder : encoder).push_back(p.key());
  }
  std::vector<std::string> decoder_prefixes;
  for (const auto& name : decoder) decoder_prefixes.push_back(name);
  require(parameter_checksum(*tuned.backbone, decoder_prefixes) == parameter_checksum(*backbone, decoder_prefixes),
          "FT decoder checksum");
  require(parameter_checksum(*tuned.backbone, encoder) != parameter_checksum(*backbone, encoder),
          "FT updates encoder/bottleneck");

  TrainPlan s2plan = lp;
  s2plan.stage = TrainStage::kStage2Fusion;
  for (auto strategy : {FusionStrategy::kSimpleConcat, FusionStrategy::kMpae}) {
    auto s2 = train_stage2_fusion(ds, stage1, strategy, s2plan, sched);
    for (std::size_t i = 0; i < 3; ++i) {
      require(s2.stage1_checksums_before[i] == s2.stage1_checksums_after[i], "stage-2 freezes stage 1");
    }
  }

  const double secs = seconds_since(t0);
  out.require(secs < 120.0, "runtime over 2 min");
  out.detail << checks << " checks, " << out.failures.size() << " failed, " << secs << "s";
}

// ---------------------------------------------------------------- shared desk-scale setup

struct DeskExperiment {
  DatasetIndex ds;
  NoiseSchedule sched = build_schedule(kDefaultTimesteps);
  std::array<UNet3D, 3> pretrained{nullptr, nullptr, nullptr};
  std::array<UNet3D, 3> scratch{nullptr, nullptr, nullptr};
};

constexpr std::int64_t kDeskPatients = 512;
constexpr std::uint64_t kDeskSeed = 11;
constexpr std::int64_t kPretrainSteps = 300;

DeskExperiment& desk_experiment() {
  static DeskExperiment e = [] {
    DeskExperiment x;
    PhantomSpec spec;
    spec.n_patients = kDeskPatients;
    spec.seed = kDeskSeed;
    x.ds = generate_dataset(spec);
    const auto arch = DenoiserConfig::desk();
    for (auto o : kOrientations) {
      const auto i = index_of(o);
      PretrainConfig pc;
      pc.steps = kPretrainSteps;
      pc.seed = 100 + i;
      // Criteria run as separate ctest processes; the checkpoint spares each one the pretraining.
      const auto dir = fs::current_path() / "acceptance_work" /
                       ("desk_pretrain_n" + std::to_string(kDeskPatients) + "_s" + std::to_string(kDeskSeed)) /
                       std::string(to_string(o));
      CheckpointInfo info;
      if (fs::exists(dir / "manifest.json")) {
        x.pretrained[i] = load_checkpoint(dir, &info);
      }
      if (!x.pretrained[i] || info.step != pc.steps || info.seed != pc.seed) {
        const auto t0 = Clock::now();
        x.pretrained[i] = pretrain(x.ds, o, pc, x.sched, arch).model;
        save_checkpoint(x.pretrained[i], x.sched, pc.steps, pc.seed, dir);
        progress("pretrained " + std::string(to_string(o)) + " in " + std::to_string(seconds_since(t0)) + "s");
      } else {
        progress("loaded pretrained " + std::string(to_string(o)) + " from " + dir.string());
      }
      // Same architecture and initialisation seed, no training.
      x.scratch[i] = make_denoiser(arch, pc.seed);
    }
    return x;
  }();
  return e;
}

metrics::MetricReport fused_test_report(DeskExperiment& e, std::array<UNet3D, 3>& backbones, const TapPoint& tap,
                                        ProbeSetting setting, const TrainPlan& stage1_plan,
                                        const TrainPlan& stage2_plan, const std::vector<std::string>* subset) {
  std::array<Stage1Artifacts, 3> s1;
  for (auto o : kOrientations) {
    s1[index_of(o)] = train_stage1(e.ds, o, tap, setting, stage1_plan, backbones[index_of(o)], e.sched, subset);
  }
  auto s2 = train_stage2_fusion(e.ds, s1, FusionStrategy::kSimpleConcat, stage2_plan, e.sched, subset);
  auto pred = predict_fused(s1, s2, e.ds.records_in(Split::kTest), e.sched, stage1_plan.noise_seed);
  return metrics::evaluate_classification(pred.scores);
}

// ---------------------------------------------------------------- 5: pretraining benefit

void criterion_pretraining_benefit(Outcome& out) {
  const auto t0 = Clock::now();
  auto& e = desk_experiment();
  TrainPlan lp;
  lp.stage = TrainStage::kStage1LP;
  lp.epochs = 20;
  lp.lr = 5e-4;
  TrainPlan fuse = lp;
  fuse.stage = TrainStage::kStage2Fusion;

  double best_gap = -1.0;
  std::string best_tap;
  for (const auto& tap : tap_grid({10, 50, 100, 200})) {
    const auto pre = fused_test_report(e, e.pretrained, tap, ProbeSetting::kLinearProbe, lp, fuse, nullptr);
    const auto rnd = fused_test_report(e, e.scratch, tap, ProbeSetting::kLinearProbe, lp, fuse, nullptr);
    const double gap = pre.macro.value.value_or(0.0) - rnd.macro.value.value_or(1.0);
    progress(tap.str() + " pretrained " + std::to_string(*pre.macro.value) + " scratch " +
             std::to_string(*rnd.macro.value));
    if (gap > best_gap) {
      best_gap = gap;
      best_tap = tap.str() + " (" + std::to_string(*pre.macro.value) + " vs " + std::to_string(*rnd.macro.value) + ")";
    }
  }
  out.require(best_gap >= 0.05, "no tap reaches a 0.05 macro-AUROC gap");
  out.detail << "best gap " << best_gap << " at " << best_tap << ", " << seconds_since(t0) << "s";
}

// ---------------------------------------------------------------- 6: label efficiency

void criterion_label_efficiency(Outcome& out) {
  const auto t0 = Clock::now();
  auto& e = desk_experiment();
  const TapPoint tap{100, BottleneckBlock::kMid2};
  const auto& train_ids = e.ds.patient_ids(Split::kTrain);
  const auto n_full = static_cast<std::int64_t>(train_ids.size());

  TrainPlan ft;
  ft.stage = TrainStage::kStage1FT;
  ft.epochs = 5;
  ft.lr = 5e-4;
  ft.backbone_lr = 2.5e-5;
  ft.min_steps = ft.total_steps(n_full);
  TrainPlan fuse;
  fuse.stage = TrainStage::kStage2Fusion;
  fuse.epochs = 20;
  fuse.lr = 5e-4;
  fuse.min_steps = fuse.total_steps(n_full);

  std::vector<double> diffs;
  double pre_drop = 0.0, rnd_drop = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto tenth = nested_subset(train_ids, 0.1, seed);
    ft.seed = seed;
    fuse.seed = seed;
    std::array<std::vector<double>, 2> drops;
    for (int arm = 0; arm < 2; ++arm) {
      auto& backbones = arm == 0 ? e.pretrained : e.scratch;
      const auto full = fused_test_report(e, backbones, tap, ProbeSetting::kFineTune, ft, fuse, nullptr);
      const auto few = fused_test_report(e, backbones, tap, ProbeSetting::kFineTune, ft, fuse, &tenth);
      for (std::size_t k = 0; k < full.per_label_auroc.size(); ++k) {
        drops[arm].push_back(full.per_label_auroc[k].value_or(0.5) - few.per_label_auroc[k].value_or(0.5));
      }
      (arm == 0 ? pre_drop : rnd_drop) += *full.macro.value - *few.macro.value;
      progress("seed " + std::to_string(seed) + (arm == 0 ? " pretrained" : " scratch") + " full " +
               std::to_string(*full.macro.value) + " 10% " + std::to_string(*few.macro.value));
    }
    for (std::size_t k = 0; k < drops[0].size(); ++k) diffs.push_back(drops[1][k] - drops[0][k]);
  }
  const auto test = metrics::permutation_test(diffs, 1 << 16, 0);
  double mean = 0.0;
  for (double d : diffs) mean += d / static_cast<double>(diffs.size());
  out.require(mean > 0.0, "pretrained arm does not degrade less");
  out.require(test.p_value < 0.05, "sign-flip p >= 0.05");
  out.detail << "mean macro drop pretrained " << pre_drop / 3 << " scratch " << rnd_drop / 3
             << ", mean paired difference " << mean << " over " << diffs.size() << " label x seed pairs, p "
             << test.p_value << (test.exact ? " (exact)" : " (MC)") << ", " << seconds_since(t0) << "s";
}

// ---------------------------------------------------------------- 7: segmentation

void criterion_segmentation(Outcome& out) {
  const auto t0 = Clock::now();
  auto& e = desk_experiment();
  const TapPoint tap{10, BottleneckBlock::kMid2};
  TrainPlan plan;
  plan.stage = TrainStage::kSegFT;
  plan.epochs = 3;
  plan.lr = 1e-3;
  plan.backbone_lr = 2.5e-5;
  const auto subset = nested_subset(e.ds.patient_ids(Split::kTrain), 0.3, 0);
  const auto test = e.ds.records_in(Split::kTest);
  std::array<double, 2> mean{};
  const auto o = Orientation::kSagittal;
  for (int arm = 0; arm < 2; ++arm) {
    auto& backbone = (arm == 0 ? e.pretrained : e.scratch)[index_of(o)];
    auto seg = train_segmentation(e.ds, o, tap, plan, backbone, e.sched, &subset);
    const auto dice = evaluate_segmentation(seg, test, e.sched, 0);
    for (const auto& [c, d] : dice) mean[arm] += d / static_cast<double>(dice.size());
    progress(std::string(arm == 0 ? "pretrained" : "scratch") + " mean Dice " + std::to_string(mean[arm]));
  }
  const double gap = mean[0] - mean[1];
  out.require(gap >= 0.03, "mean Dice gap below 0.03");
  out.detail << "mean Dice pretrained " << mean[0] << " scratch " << mean[1] << " gap " << gap << ", "
             << seconds_since(t0) << "s";
}

// ---------------------------------------------------------------- CLI helpers

struct CliRun {
  int code = 0;
  std::string err;
};

CliRun cli(const fs::path& ws, std::vector<std::string> args, const fs::path& config) {
  args.insert(args.begin(), "orthodiff");
  args.insert(args.begin() + 2, {"-w", ws.string(), "-c", config.string()});
  std::ostringstream sink, err;
  CliRun r;
  r.code = cli::run(args, sink, err);
  r.err = err.str();
  return r;
}

Json read_json(const fs::path& p) {
  std::ifstream in(p);
  return Json::parse(in);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::current_path() / "acceptance_work" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------- 8: selection protocol

void criterion_selection(Outcome& out) {
  const auto t0 = Clock::now();
  const auto root = scratch_dir("selection");
  const auto config = root / "config.json";
  std::ofstream(config) << R"({
  "seed": 21,
  "data": {"patients": 40},
  "pretrain": {"steps": 5},
  "probe": {"epochs": 2},
  "fuse": {"epochs": 2},
  "tap_grid": {"timesteps": [10, 50], "blocks": ["mid_0", "mid_1", "mid_2"]},
  "top_k": 4
})";

  std::array<std::string, 2> selections;
  for (int run = 0; run < 2; ++run) {
    const auto ws = root / ("ws" + std::to_string(run));
    for (const auto* cmd : {"synth", "pretrain", "select"}) {
      const auto r = cli(ws, {cmd}, config);
      out.require(r.code == 0, std::string(cmd) + " failed: " + r.err);
      if (r.code != 0) return;
    }
    const auto sel = read_json(ws / "select" / "selection.json");
    const auto manifest = read_json(ws / "select" / "manifest.json");
    out.require(sel["evaluated_combinations"] == 64, "selection.json does not report 64 combinations");
    std::istringstream csv(read_text(ws / "select" / "candidates.csv"));
    std::string line;
    std::size_t rows = 0;
    std::getline(csv, line);
    std::set<std::string> unique;
    while (std::getline(csv, line)) {
      ++rows;
      unique.insert(line.substr(0, line.rfind(',')));
    }
    out.require(rows == 64 && unique.size() == 64, "candidates.csv does not list 64 distinct candidates");
    out.require(manifest["test_split_reads"] == 0, "select read the test split");
    selections[static_cast<std::size_t>(run)] = sel.dump();
    if (run == 0) out.detail << "taps " << sel["taps"].dump() << ", ";
  }
  out.require(selections[0] == selections[1], "selection differs between identical runs");

  // All-tie grids resolve to the same triple regardless of evaluation order.
  GridResults grid;
  for (auto o : kOrientations) {
    for (const auto& t : tap_grid({10, 30, 50})) grid[o][t] = 0.75;
  }
  const auto a = select_config(grid, [](const auto&) { return 0.5; });
  const auto b = select_config(grid, [](const auto&) { return 0.5; });
  const std::array<TapPoint, 3> smallest{TapPoint{10, BottleneckBlock::kMid0}, TapPoint{10, BottleneckBlock::kMid0},
                                         TapPoint{10, BottleneckBlock::kMid0}};
  out.require(a.taps == b.taps && a.taps == smallest, "tie-break is not deterministic");
  out.detail << "64 candidates twice, identical selection, " << seconds_since(t0) << "s";
}

// ---------------------------------------------------------------- 9: reproducibility

const char* kPipelineConfig = R"({
  "seed": 5,
  "data": {"patients": 48, "multi_scan_fraction": 0.2},
  "pretrain": {"steps": 20},
  "probe": {"epochs": 3},
  "fuse": {"epochs": 3}
})";

std::vector<std::vector<std::string>> pipeline_commands() {
  return {{"synth"},           {"pretrain"}, {"probe"},
          {"fuse"},            {"evaluate"}, {"fuse", "--fusion", "mpae"},
          {"evaluate", "--fusion", "mpae"}};
}

void criterion_reproducibility(Outcome& out, bool write_golden) {
  const auto t0 = Clock::now();
  const auto root = scratch_dir("pipeline");
  const auto config = root / "config.json";
  std::ofstream(config) << kPipelineConfig;

  std::array<std::string, 2> reports, gate_reports;
  double macro = 0.0;
  for (int run = 0; run < 2; ++run) {
    const auto ws = root / ("ws" + std::to_string(run));
    for (const auto& cmd : pipeline_commands()) {
      const auto r = cli(ws, cmd, config);
      out.require(r.code == 0, cmd.front() + " failed: " + r.err);
      if (r.code != 0) return;
    }
    const auto eval_dir = ws / "evaluate" / "lp-simple_concat";
    reports[static_cast<std::size_t>(run)] = read_text(eval_dir / "report.json") + read_text(eval_dir / "report.csv");
    gate_reports[static_cast<std::size_t>(run)] = read_text(ws / "evaluate" / "lp-mpae" / "report.json");
    macro = read_json(eval_dir / "report.json")["macro_auc"].get<double>();

    std::istringstream gates(read_text(ws / "evaluate" / "lp-mpae" / "gate_weights.csv"));
    std::string line;
    std::getline(gates, line);
    bool sums = true;
    while (std::getline(gates, line)) {
      std::istringstream cells(line);
      std::string cell;
      std::getline(cells, cell, ',');
      std::getline(cells, cell, ',');
      double s = 0.0;
      while (std::getline(cells, cell, ',')) s += std::stod(cell);
      sums = sums && std::abs(s - 1.0) < 1e-6;
    }
    out.require(sums, "gate weight rows do not sum to one");
  }
  out.require(reports[0] == reports[1], "metric reports differ between runs");
  out.require(gate_reports[0] == gate_reports[1], "MPAE reports differ between runs");

  const auto golden_path = fs::path(ORTHODIFF_GOLDEN_DIR) / "desk_pipeline.json";
  if (write_golden) {
    Json g{{"macro_auc", macro}, {"config", Json::parse(kPipelineConfig)}};
    std::ofstream(golden_path) << g.dump(2) << "\n";
  }
  if (!fs::exists(golden_path)) {
    out.require(false, "golden file missing: " + golden_path.string());
  } else {
    const double golden = read_json(golden_path)["macro_auc"].get<double>();
    out.require(golden == macro, "macro-AUROC " + std::to_string(macro) + " differs from golden " +
                                     std::to_string(golden));
  }
  out.detail << "macro-AUROC " << macro << " bit-identical across two runs and golden, " << seconds_since(t0) << "s";
}

struct Criterion {
  int id;
  const char* title;
  std::function<void(Outcome&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> selected;
  bool write_golden = false;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--criterion" && i + 1 < argc) {
      selected.push_back(std::stoi(argv[++i]));
    } else if (arg == "--write-golden") {
      write_golden = true;
    } else {
      std::cerr << "usage: orthodiff_acceptance [--criterion N]... [--write-golden]\n";
      return 2;
    }
  }

  const std::vector<Criterion> criteria = {
      {1, "oracle equivalence", criterion_oracles},
      {2, "finite-difference gradients", criterion_gradients},
      {3, "diffusion marginal statistics", criterion_diffusion},
      {4, "invariant suite", criterion_invariants},
      {5, "pretraining benefit (LP)", criterion_pretraining_benefit},
      {6, "label efficiency (FT)", criterion_label_efficiency},
      {7, "segmentation at 30% labels", criterion_segmentation},
      {8, "selection protocol", criterion_selection},
      {9, "reproducibility", [&](Outcome& o) { criterion_reproducibility(o, write_golden); }},
  };
  if (selected.empty()) {
    for (const auto& c : criteria) selected.push_back(c.id);
  }

  int failed = 0;
  for (int id : selected) {
    const auto it = std::find_if(criteria.begin(), criteria.end(), [&](const auto& c) { return c.id == id; });
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << id << "\n";
      return 2;
    }
    Outcome out;
    try {
      it->run(out);
    } catch (const std::exception& e) {
      out.require(false, std::string("exception: ") + e.what());
    }
    std::ostringstream line;
    line << "criterion " << id << ' ' << (out.pass ? "PASS" : "FAIL") << ' ' << it->title << " :: "
         << out.detail.str();
    for (const auto& f : out.failures) line << " [" << f << "]";
    std::cout << line.str() << std::endl;
    failed += out.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
