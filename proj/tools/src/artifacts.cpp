#include "artifacts.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "orthodiff/checkpoint.hpp"
#include "orthodiff/errors.hpp"

namespace orthodiff::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

void write_json(const fs::path& path, const Json& j) {
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw Error("failed to write " + path.string());
}

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return Json::parse(in);
}

}  // namespace

void save_stage1(Stage1Artifacts& a, const NoiseSchedule& sched, const fs::path& dir) {
  fs::create_directories(dir);
  save_checkpoint(a.backbone, sched, 0, 0, dir / "backbone");
  save_module_tensors(*a.pooling, dir / "pooling");
  save_module_tensors(*a.head, dir / "head");
  write_json(dir / "stage1.json", Json{{"orientation", to_string(a.orientation)},
                                       {"tap", a.tap.str()},
                                       {"setting", to_string(a.setting)},
                                       {"pooling", to_string(a.pooling->method())},
                                       {"channels", a.backbone->config().bottleneck_channels()},
                                       {"heads", a.pooling->heads()},
                                       {"labels", a.head->options.out_features()},
                                       {"epoch_losses", a.epoch_losses}});
}

Stage1Artifacts load_stage1(const fs::path& dir) {
  const auto info = read_json(dir / "stage1.json");
  Stage1Artifacts a;
  a.orientation = orientation_from_string(info.at("orientation").get<std::string>());
  a.tap = TapPoint::parse(info.at("tap").get<std::string>());
  a.setting = probe_setting_from_string(info.at("setting").get<std::string>());
  a.backbone = load_checkpoint(dir / "backbone");
  a.pooling = PoolingModule(pooling_method_from_string(info.at("pooling").get<std::string>()),
                            info.at("channels").get<std::int64_t>(), info.at("heads").get<std::int64_t>());
  load_module_tensors(*a.pooling, dir / "pooling");
  a.head = torch::nn::Linear(a.pooling->out_dim(), info.at("labels").get<std::int64_t>());
  load_module_tensors(*a.head, dir / "head");
  a.backbone->eval();
  a.pooling->eval();
  a.head->eval();
  a.epoch_losses = info.at("epoch_losses").get<std::vector<double>>();
  return a;
}

void save_stage2(Stage2Artifacts& a, const fs::path& dir) {
  fs::create_directories(dir);
  Json info{{"strategy", to_string(a.strategy)}, {"epoch_losses", a.epoch_losses}, {"excluded", a.excluded_patients}};
  if (a.gate) {
    save_module_tensors(*a.gate, dir / "gate");
    info["labels"] = a.gate->n_labels();
  } else {
    save_module_tensors(*a.fusion, dir / "fusion");
    save_module_tensors(*a.head, dir / "head");
    info["in_dim"] = a.head->options.in_features();
    info["labels"] = a.head->options.out_features();
  }
  write_json(dir / "stage2.json", info);
}

Stage2Artifacts load_stage2(const fs::path& dir) {
  const auto info = read_json(dir / "stage2.json");
  Stage2Artifacts a;
  a.strategy = fusion_strategy_from_string(info.at("strategy").get<std::string>());
  const auto k = info.at("labels").get<std::int64_t>();
  if (a.strategy == FusionStrategy::kMpae) {
    a.gate = MpaeGate(k);
    load_module_tensors(*a.gate, dir / "gate");
    a.gate->eval();
  } else {
    // The head width pins down the per-orientation embedding width.
    const auto head_in = info.at("in_dim").get<std::int64_t>();
    std::int64_t c = head_in;
    for (std::int64_t cand = 1; cand <= head_in; ++cand) {
      if (fused_dim(a.strategy, cand, cand) == head_in) {
        c = cand;
        break;
      }
    }
    a.fusion = FusionModule(a.strategy, c, c);
    load_module_tensors(*a.fusion, dir / "fusion");
    a.head = torch::nn::Linear(head_in, k);
    load_module_tensors(*a.head, dir / "head");
    a.fusion->eval();
    a.head->eval();
  }
  a.epoch_losses = info.at("epoch_losses").get<std::vector<double>>();
  a.excluded_patients = info.at("excluded").get<std::vector<std::string>>();
  return a;
}

void save_ehr(EhrFusionArtifacts& a, const fs::path& dir) {
  fs::create_directories(dir);
  save_module_tensors(*a.model, dir / "model");
  save_module_tensors(*a.late, dir / "late");
  auto gamma = a.late->gamma().detach().to(torch::kFloat64).contiguous();
  write_json(dir / "ehr.json", Json{{"labels", a.model->n_labels()},
                                    {"mean", a.stats.mean},
                                    {"stddev", a.stats.stddev},
                                    {"gamma", std::vector<double>(gamma.data_ptr<double>(), gamma.data_ptr<double>() + gamma.numel())}});
}

EhrFusionArtifacts load_ehr(const fs::path& dir) {
  const auto info = read_json(dir / "ehr.json");
  EhrFusionArtifacts a;
  const auto k = info.at("labels").get<std::int64_t>();
  a.stats.mean = info.at("mean").get<std::array<double, 3>>();
  a.stats.stddev = info.at("stddev").get<std::array<double, 3>>();
  a.model = EhrModel(k);
  load_module_tensors(*a.model, dir / "model");
  a.late = LateFusion(k);
  load_module_tensors(*a.late, dir / "late");
  a.model->eval();
  a.late->eval();
  return a;
}

void save_segmentation(SegArtifacts& a, const NoiseSchedule& sched, const fs::path& dir) {
  fs::create_directories(dir);
  save_checkpoint(a.backbone, sched, 0, 0, dir / "backbone");
  save_module_tensors(*a.head, dir / "head");
  const auto classes = a.head->named_parameters()["classifier.weight"].size(0);
  write_json(dir / "segment.json", Json{{"orientation", to_string(a.orientation)},
                                        {"tap", a.tap.str()},
                                        {"classes", classes},
                                        {"epoch_losses", a.epoch_losses}});
}

SegArtifacts load_segmentation(const fs::path& dir) {
  const auto info = read_json(dir / "segment.json");
  SegArtifacts a;
  a.orientation = orientation_from_string(info.at("orientation").get<std::string>());
  a.tap = TapPoint::parse(info.at("tap").get<std::string>());
  a.backbone = load_checkpoint(dir / "backbone");
  const auto& cfg = a.backbone->config();
  a.head = SegHead(cfg.bottleneck_channels(), info.at("classes").get<std::int64_t>(), cfg.input);
  load_module_tensors(*a.head, dir / "head");
  a.backbone->eval();
  a.head->eval();
  a.epoch_losses = info.at("epoch_losses").get<std::vector<double>>();
  return a;
}

}  // namespace orthodiff::cli
