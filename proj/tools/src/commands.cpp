#include "commands.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "artifacts.hpp"
#include "orthodiff/checkpoint.hpp"
#include "orthodiff/dataset_io.hpp"
#include "orthodiff/hashing.hpp"
#include "workspace.hpp"

namespace orthodiff::cli {

namespace {

using Clock = std::chrono::steady_clock;

std::ostream& log(const Context& ctx) {
  static std::ostringstream sink;
  return ctx.log != nullptr ? *ctx.log : sink;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw Error("failed to write " + path.string());
}

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return Json::parse(in);
}

// Removes previous outputs but keeps the lock held by this process.
void clear_outputs(const fs::path& dir) {
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().filename() != ".lock") fs::remove_all(e.path());
  }
}

std::string setting_dir(ProbeSetting s) { return s == ProbeSetting::kFineTune ? "finetune" : "probe"; }

std::vector<std::string> label_names(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < k; ++i) names.push_back("label_" + std::to_string(i));
  return names;
}

std::uint64_t derived_seed(std::uint64_t seed, const std::string& what) { return mix_seed(seed, fnv1a(what)); }

class Stage {
 public:
  Stage(const Context& ctx, std::string command)
      : ctx_(ctx), dir_(stage_dir(ctx, command)), lock_(dir_), started_(Clock::now()) {
    record_.command = std::move(command);
    record_.config = ctx.config_json;
  }

  const fs::path& dir() const { return dir_; }
  RunRecord& record() { return record_; }

  DatasetIndex dataset() {
    const auto root = stage_dir(ctx_, "synth");
    record_.inputs["synth"] = manifest_digest(require_manifest(root, "synth"));
    data_ = read_dataset(root);
    data_->reset_access_log();
    return *data_;
  }

  std::array<UNet3D, 3> pretrained() {
    const auto root = stage_dir(ctx_, "pretrain");
    record_.inputs["pretrain"] = manifest_digest(require_manifest(root, "pretrain"));
    std::array<UNet3D, 3> out{nullptr, nullptr, nullptr};
    for (auto o : kOrientations) out[index_of(o)] = load_checkpoint(root / std::string(to_string(o)));
    return out;
  }

  std::array<TapPoint, 3> taps() {
    if (ctx_.config.taps) return *ctx_.config.taps;
    const auto root = stage_dir(ctx_, "select");
    record_.inputs["select"] = manifest_digest(require_manifest(root, "select"));
    const auto sel = read_json_file(root / "selection.json");
    std::array<TapPoint, 3> t;
    for (auto o : kOrientations) {
      t[index_of(o)] = TapPoint::parse(sel.at("taps").at(std::string(to_string(o))).get<std::string>());
    }
    return t;
  }

  std::array<Stage1Artifacts, 3> stage1(ProbeSetting s) {
    const auto name = setting_dir(s);
    const auto root = stage_dir(ctx_, name);
    record_.inputs[name] = manifest_digest(require_manifest(root, name));
    std::array<Stage1Artifacts, 3> out;
    for (auto o : kOrientations) out[index_of(o)] = load_stage1(root / std::string(to_string(o)));
    return out;
  }

  // Returns false when --cache found identical outputs.
  bool begin() {
    if (ctx_.cache && cache_hit(dir_, cache_key(record_))) {
      log(ctx_) << record_.command << ": up to date (" << dir_.string() << ")\n";
      return false;
    }
    clear_outputs(dir_);
    return true;
  }

  void finish(bool may_read_test = false) {
    if (data_) {
      record_.test_split_reads = data_->access_log().count(Split::kTest);
      if (!may_read_test && record_.test_split_reads != 0) {
        throw Error(record_.command + " read the test split; only evaluate and labeleff may");
      }
    }
    write_manifest(ctx_.workspace, dir_, record_, started_);
    log(ctx_) << record_.command << ": wrote " << dir_.string() << "\n";
  }

 private:
  const Context& ctx_;
  fs::path dir_;
  DirectoryLock lock_;
  Clock::time_point started_;
  RunRecord record_;
  std::optional<DatasetIndex> data_;
};

double macro_or_zero(const metrics::MultiLabelScores& s) {
  return metrics::macro_auc(s).value.value_or(0.0);
}

std::string predictions_csv(const std::vector<std::string>& patients, const metrics::MultiLabelScores& s) {
  std::ostringstream out;
  out << "patient_id,label,probability,truth\n" << std::setprecision(17);
  for (std::size_t i = 0; i < s.n; ++i) {
    for (std::size_t j = 0; j < s.k; ++j) {
      out << patients[i] << ",label_" << j << ',' << s.score(i, j) << ',' << int(s.label(i, j)) << '\n';
    }
  }
  return out.str();
}

Json optional_list(const std::vector<std::optional<double>>& values) {
  Json out = Json::array();
  for (const auto& v : values) out.push_back(v ? Json(*v) : Json(nullptr));
  return out;
}

Json dice_json(const std::map<int, double>& dice) {
  Json per = Json::object();
  double mean = 0.0;
  for (const auto& [c, v] : dice) {
    per[std::to_string(c)] = v;
    mean += v / static_cast<double>(dice.size());
  }
  return Json{{"per_class", per}, {"mean", mean}};
}

std::vector<const StudyRecord*> restrict_to(const std::vector<const StudyRecord*>& records,
                                            const std::vector<std::string>& ids) {
  std::vector<const StudyRecord*> out;
  for (const auto& id : ids) {
    for (const auto* r : records) {
      if (r->patient_id == id) out.push_back(r);
    }
  }
  return out;
}

metrics::MultiLabelScores scores_from_logits(const torch::Tensor& logits,
                                             const std::vector<const StudyRecord*>& records) {
  auto p = torch::sigmoid(logits).to(torch::kFloat64).contiguous();
  metrics::MultiLabelScores s;
  s.n = static_cast<std::size_t>(p.size(0));
  s.k = static_cast<std::size_t>(p.size(1));
  s.scores.assign(p.data_ptr<double>(), p.data_ptr<double>() + p.numel());
  for (const auto* r : records) s.truth.insert(s.truth.end(), r->labels.begin(), r->labels.end());
  return s;
}

void train_stage1_command(const Context& ctx, ProbeSetting setting) {
  Stage stage(ctx, setting_dir(setting));
  const auto& cfg = ctx.config;
  auto data = stage.dataset();
  auto backbones = stage.pretrained();
  auto taps = stage.taps();
  const auto& plan = setting == ProbeSetting::kFineTune ? cfg.finetune : cfg.probe;
  stage.record().seeds = Json{{"train", plan.seed}, {"noise", plan.noise_seed}};
  if (!stage.begin()) return;

  const auto sched = cfg.schedule();
  const auto val = data.records_in(Split::kVal);
  Json results = Json::object();
  for (auto o : kOrientations) {
    const auto i = index_of(o);
    log(ctx) << setting_dir(setting) << ": " << to_string(o) << " at " << taps[i].str() << "\n";
    auto a = train_stage1(data, o, taps[i], setting, plan, backbones[i], sched);
    save_stage1(a, sched, stage.dir() / std::string(to_string(o)));
    const auto scores = predict_stage1(a, val, sched, plan.noise_seed);
    results[std::string(to_string(o))] = Json{{"tap", taps[i].str()},
                                              {"val_macro_auroc", macro_or_zero(scores)},
                                              {"backbone_checksum_before", a.backbone_checksum_before},
                                              {"backbone_checksum_after", a.backbone_checksum_after}};
  }
  stage.record().results = results;
  stage.finish();
}

}  // namespace

fs::path stage_dir(const Context& ctx, const std::string& command) {
  const auto& c = ctx.config;
  const auto variant = std::string(to_string(c.setting)) + "-" + std::string(to_string(c.fusion));
  if (command == "synth") return c.dataset.empty() ? ctx.workspace / "data" : fs::path(c.dataset);
  if (command == "fuse") return ctx.workspace / "fuse" / variant;
  if (command == "evaluate") {
    return ctx.workspace / "evaluate" / (c.task == "segmentation" ? std::string("segmentation") : variant);
  }
  if (command == "labeleff") return ctx.workspace / "labeleff" / (std::string(to_string(c.setting)) + "-" + c.task);
  return ctx.workspace / command;
}

void cmd_synth(const Context& ctx) {
  Stage stage(ctx, "synth");
  const auto& cfg = ctx.config;
  stage.record().seeds = Json{{"data", cfg.data.seed}};
  if (!stage.begin()) return;
  auto index = generate_dataset(cfg.data, cfg.split);
  write_dataset(index, stage.dir(), &cfg.data);
  stage.record().results = Json{{"dataset_hash", dataset_hash(index)},
                                {"train", index.patient_ids(Split::kTrain).size()},
                                {"val", index.patient_ids(Split::kVal).size()},
                                {"test", index.patient_ids(Split::kTest).size()}};
  stage.finish();
}

void cmd_pretrain(const Context& ctx) {
  Stage stage(ctx, "pretrain");
  const auto& cfg = ctx.config;
  auto data = stage.dataset();
  Json seeds = Json::object();
  for (auto o : kOrientations) {
    seeds[std::string(to_string(o))] = derived_seed(cfg.seed, "pretrain:" + std::string(to_string(o)));
  }
  stage.record().seeds = seeds;
  if (!stage.begin()) return;

  const auto sched = cfg.schedule();
  const auto arch = cfg.architecture();
  Json results = Json::object();
  for (auto o : kOrientations) {
    const auto name = std::string(to_string(o));
    auto pc = cfg.pretrain;
    pc.seed = seeds[name].get<std::uint64_t>();
    log(ctx) << "pretrain: " << name << " for " << pc.steps << " steps\n";
    auto r = pretrain(data, o, pc, sched, arch);
    const auto hash = save_checkpoint(r.model, sched, pc.steps, pc.seed, stage.dir() / name);
    write_text(stage.dir() / (name + "_loss.csv"), loss_curve_csv(r.loss_curve));
    results[name] = Json{{"final_loss", r.loss_curve.back().loss}, {"checkpoint_hash", hash}};
  }
  stage.record().results = results;
  stage.finish();
}

void cmd_probe(const Context& ctx) { train_stage1_command(ctx, ProbeSetting::kLinearProbe); }

void cmd_finetune(const Context& ctx) { train_stage1_command(ctx, ProbeSetting::kFineTune); }

void cmd_fuse(const Context& ctx) {
  Stage stage(ctx, "fuse");
  const auto& cfg = ctx.config;
  auto data = stage.dataset();
  auto s1 = stage.stage1(cfg.setting);
  stage.record().seeds = Json{{"train", cfg.fuse.seed}, {"noise", cfg.fuse.noise_seed}};
  if (!stage.begin()) return;

  const auto sched = cfg.schedule();
  auto s2 = train_stage2_fusion(data, s1, cfg.fusion, cfg.fuse, sched);
  save_stage2(s2, stage.dir());
  auto val = predict_fused(s1, s2, data.records_in(Split::kVal), sched, cfg.fuse.noise_seed);
  Json results{{"val_macro_auroc", macro_or_zero(val.scores)}, {"excluded_patients", s2.excluded_patients}};

  if (cfg.ehr) {
    const auto train = data.records_in(Split::kTrain);
    auto fitted = predict_fused(s1, s2, train, sched, cfg.fuse.noise_seed);
    auto ehr = train_ehr_fusion(restrict_to(train, fitted.patient_ids), fitted.patient_logits, cfg.fuse);
    save_ehr(ehr, stage.dir() / "ehr");
    const auto val_records = restrict_to(data.records_in(Split::kVal), val.patient_ids);
    auto fused = predict_ehr_fusion(ehr, val_records, val.patient_logits);
    results["val_macro_auroc_ehr"] = macro_or_zero(scores_from_logits(fused, val_records));
  }
  stage.record().results = results;
  stage.finish();
}

void cmd_segment(const Context& ctx) {
  Stage stage(ctx, "segment");
  const auto& cfg = ctx.config;
  auto data = stage.dataset();
  auto backbones = stage.pretrained();
  stage.record().seeds = Json{{"train", cfg.segment.seed}, {"noise", cfg.segment.noise_seed}};
  if (!stage.begin()) return;

  const auto sched = cfg.schedule();
  auto a = train_segmentation(data, cfg.segment_orientation, cfg.segment_tap, cfg.segment,
                              backbones[index_of(cfg.segment_orientation)], sched);
  save_segmentation(a, sched, stage.dir());
  auto dice = evaluate_segmentation(a, data.records_in(Split::kVal), sched, cfg.segment.noise_seed);
  stage.record().results = Json{{"val_dice", dice_json(dice)}};
  stage.finish();
}

void cmd_select(const Context& ctx) {
  Stage stage(ctx, "select");
  const auto& cfg = ctx.config;
  auto data = stage.dataset();
  auto backbones = stage.pretrained();
  const auto& plan = cfg.stage1_plan();
  stage.record().seeds = Json{{"train", plan.seed}, {"noise", plan.noise_seed}};
  if (!stage.begin()) return;

  const auto sched = cfg.schedule();
  const auto val = data.records_in(Split::kVal);
  const auto grid_taps = tap_grid(cfg.grid_timesteps, cfg.grid_blocks);

  std::map<std::pair<Orientation, TapPoint>, Stage1Artifacts> trained;
  GridResults grid;
  std::ostringstream grid_csv;
  grid_csv << "orientation,tap,val_macro_auroc\n" << std::setprecision(17);
  for (auto o : kOrientations) {
    for (const auto& tap : grid_taps) {
      auto a = train_stage1(data, o, tap, cfg.setting, plan, backbones[index_of(o)], sched);
      const double score = macro_or_zero(predict_stage1(a, val, sched, plan.noise_seed));
      grid[o][tap] = score;
      grid_csv << to_string(o) << ',' << tap.str() << ',' << score << '\n';
      trained.emplace(std::make_pair(o, tap), std::move(a));
    }
    log(ctx) << "select: scored " << grid_taps.size() << " taps for " << to_string(o) << "\n";
  }

  std::ostringstream cand_csv;
  cand_csv << "sagittal,coronal,axial,val_macro_auroc\n" << std::setprecision(17);
  auto evaluate = [&](const std::array<TapPoint, 3>& taps) {
    std::array<Stage1Artifacts, 3> s1;
    for (auto o : kOrientations) s1[index_of(o)] = trained.at({o, taps[index_of(o)]});
    auto s2 = train_stage2_fusion(data, s1, cfg.fusion, cfg.fuse, sched);
    const double score = macro_or_zero(predict_fused(s1, s2, val, sched, cfg.fuse.noise_seed).scores);
    cand_csv << taps[0].str() << ',' << taps[1].str() << ',' << taps[2].str() << ',' << score << '\n';
    return score;
  };
  auto sel = select_config(grid, evaluate, cfg.setting, cfg.top_k);

  Json taps = Json::object();
  Json candidates = Json::object();
  for (auto o : kOrientations) {
    const auto name = std::string(to_string(o));
    taps[name] = sel.taps[index_of(o)].str();
    Json list = Json::array();
    for (const auto& t : sel.candidates[index_of(o)]) list.push_back(t.str());
    candidates[name] = list;
  }
  Json doc{{"taps", taps},
           {"setting", to_string(sel.setting)},
           {"fusion", to_string(cfg.fusion)},
           {"validation_score", sel.validation_score},
           {"candidates", candidates},
           {"evaluated_combinations", sel.evaluated_combinations}};
  write_text(stage.dir() / "selection.json", doc.dump(2) + "\n");
  write_text(stage.dir() / "grid.csv", grid_csv.str());
  write_text(stage.dir() / "candidates.csv", cand_csv.str());
  stage.record().results = Json{{"evaluated_combinations", sel.evaluated_combinations}, {"taps", taps}};
  stage.finish();
}

void cmd_evaluate(const Context& ctx) {
  Stage stage(ctx, "evaluate");
  const auto& cfg = ctx.config;
  auto data = stage.dataset();
  const auto sched = cfg.schedule();

  if (cfg.task == "segmentation") {
    const auto seg_dir = stage_dir(ctx, "segment");
    stage.record().inputs["segment"] = manifest_digest(require_manifest(seg_dir, "segment"));
    stage.record().seeds = Json{{"noise", cfg.segment.noise_seed}};
    if (!stage.begin()) return;
    auto a = load_segmentation(seg_dir);
    auto dice = evaluate_segmentation(a, data.records_in(Split::kTest), sched, cfg.segment.noise_seed);
    Json report{{"orientation", to_string(a.orientation)}, {"tap", a.tap.str()}, {"dice", dice_json(dice)}};
    write_text(stage.dir() / "segmentation_report.json", report.dump(2) + "\n");
    stage.record().results = Json{{"mean_dice", report["dice"]["mean"]}};
    stage.finish(true);
    return;
  }

  auto s1 = stage.stage1(cfg.setting);
  const auto fuse_dir = stage_dir(ctx, "fuse");
  stage.record().inputs["fuse"] = manifest_digest(require_manifest(fuse_dir, "fuse"));
  stage.record().seeds = Json{{"noise", cfg.fuse.noise_seed}};
  if (!stage.begin()) return;

  auto s2 = load_stage2(fuse_dir);
  const auto test = data.records_in(Split::kTest);
  auto pred = predict_fused(s1, s2, test, sched, cfg.fuse.noise_seed);
  const auto names = label_names(pred.scores.k);
  auto report = metrics::evaluate_classification(pred.scores, cfg.threshold);
  write_text(stage.dir() / "report.json", report.to_json(names));
  write_text(stage.dir() / "report.csv", report.to_csv(names));
  write_text(stage.dir() / "predictions.csv", predictions_csv(pred.patient_ids, pred.scores));
  if (cfg.fusion == FusionStrategy::kMpae) {
    write_text(stage.dir() / "gate_weights.csv", gate_weights_csv(pred.patient_ids, pred.gate_alpha, names));
  }
  Json results{{"macro_auroc", report.macro.value ? Json(*report.macro.value) : Json(nullptr)},
               {"per_label_auroc", optional_list(report.per_label_auroc)},
               {"test_patients", pred.scores.n}};

  if (fs::exists(fuse_dir / "ehr" / "ehr.json")) {
    auto ehr = load_ehr(fuse_dir / "ehr");
    const auto records = restrict_to(test, pred.patient_ids);
    auto fused = predict_ehr_fusion(ehr, records, pred.patient_logits);
    auto ehr_report = metrics::evaluate_classification(scores_from_logits(fused, records), cfg.threshold);
    write_text(stage.dir() / "ehr_report.json", ehr_report.to_json(names));
    results["macro_auroc_ehr"] = ehr_report.macro.value ? Json(*ehr_report.macro.value) : Json(nullptr);
  }
  stage.record().results = results;
  stage.finish(true);
}

void cmd_labeleff(const Context& ctx) {
  Stage stage(ctx, "labeleff");
  const auto& cfg = ctx.config;
  auto data = stage.dataset();
  auto pretrained = stage.pretrained();
  const bool diagnosis = cfg.task == "diagnosis";
  std::array<TapPoint, 3> taps{};
  if (diagnosis) taps = stage.taps();
  stage.record().seeds = Json{{"train", cfg.seed}, {"subset", cfg.subset_seed}, {"noise", cfg.noise_seed}};
  if (cfg.label_fractions.empty()) throw ConfigError("label_fractions must not be empty");
  if (!stage.begin()) return;

  const auto sched = cfg.schedule();
  const auto arch = cfg.architecture();
  std::array<UNet3D, 3> scratch{nullptr, nullptr, nullptr};
  for (auto o : kOrientations) {
    scratch[index_of(o)] = make_denoiser(arch, derived_seed(cfg.seed, "scratch:" + std::string(to_string(o))));
  }
  // Every fraction gets as many optimiser steps as the full training set.
  const auto n_train = static_cast<std::int64_t>(data.patient_ids(Split::kTrain).size());
  auto equalise = [&](TrainPlan p) {
    p.min_steps = std::max(p.min_steps, p.total_steps(n_train));
    return p;
  };
  const auto plan1 = equalise(cfg.stage1_plan());
  const auto plan2 = equalise(cfg.fuse);
  const auto plan_seg = equalise(cfg.segment);
  const auto test = data.records_in(Split::kTest);

  auto trainer = [&](std::array<UNet3D, 3>& backbones, const std::string& arm) -> FractionTrainer {
    return [&, arm](double fraction, const std::vector<std::string>& subset) {
      log(ctx) << "labeleff: " << arm << " at " << fraction << "\n";
      CurvePoint p;
      p.arm = arm;
      if (diagnosis) {
        std::array<Stage1Artifacts, 3> s1;
        for (auto o : kOrientations) {
          s1[index_of(o)] = train_stage1(data, o, taps[index_of(o)], cfg.setting, plan1, backbones[index_of(o)],
                                         sched, &subset);
        }
        auto s2 = train_stage2_fusion(data, s1, cfg.fusion, plan2, sched, &subset);
        auto report = metrics::evaluate_classification(
            predict_fused(s1, s2, test, sched, cfg.noise_seed).scores, cfg.threshold);
        p.metric = "macro_auroc";
        p.value = report.macro.value.value_or(std::numeric_limits<double>::quiet_NaN());
        p.per_label = report.per_label_auroc;
        p.skipped_labels = report.macro.undefined_labels;
      } else {
        const auto o = cfg.segment_orientation;
        auto a = train_segmentation(data, o, cfg.segment_tap, plan_seg, backbones[index_of(o)], sched, &subset);
        auto dice = evaluate_segmentation(a, test, sched, cfg.noise_seed);
        p.metric = "mean_dice";
        p.value = dice_json(dice)["mean"].get<double>();
        for (const auto& [c, v] : dice) p.per_label.emplace_back(v);
      }
      return p;
    };
  };
  auto curve = label_efficiency_run(data, cfg.label_fractions, cfg.subset_seed, trainer(pretrained, "pretrained"));
  auto scratch_curve = label_efficiency_run(data, cfg.label_fractions, cfg.subset_seed, trainer(scratch, "scratch"));
  const auto lo_pre = curve.front();
  const auto hi_pre = curve.back();
  const auto lo_scr = scratch_curve.front();
  const auto hi_scr = scratch_curve.back();
  curve.insert(curve.end(), scratch_curve.begin(), scratch_curve.end());
  write_text(stage.dir() / "curve.csv", curve_csv(curve));

  // Paired per-label differences of the drop from the largest to the smallest fraction.
  std::vector<double> diffs;
  for (std::size_t j = 0; j < hi_pre.per_label.size(); ++j) {
    if (hi_pre.per_label[j] && lo_pre.per_label[j] && hi_scr.per_label[j] && lo_scr.per_label[j]) {
      diffs.push_back((*hi_scr.per_label[j] - *lo_scr.per_label[j]) - (*hi_pre.per_label[j] - *lo_pre.per_label[j]));
    }
  }
  Json summary{{"metric", lo_pre.metric},
               {"fractions", cfg.label_fractions},
               {"drop_pretrained", hi_pre.value - lo_pre.value},
               {"drop_scratch", hi_scr.value - lo_scr.value},
               {"paired_differences", diffs}};
  if (!diffs.empty()) {
    auto test_result = metrics::permutation_test(diffs, 1 << 16, cfg.seed);
    summary["permutation_p"] = test_result.p_value;
  }
  write_text(stage.dir() / "summary.json", summary.dump(2) + "\n");
  stage.record().results = summary;
  stage.finish(true);
}

}  // namespace orthodiff::cli
