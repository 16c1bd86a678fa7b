#include "run_config.hpp"

#include <set>
#include <sstream>

#include "orthodiff/errors.hpp"

namespace orthodiff::cli {

namespace {

Json plan_json(double lr, double backbone_lr, std::int64_t epochs) {
  return Json{{"epochs", epochs},
              {"lr", lr},
              {"backbone_lr", backbone_lr},
              {"batch_size", 8},
              {"min_steps", 0},
              {"weight_decay", 0.0},
              {"pooling", "sap"}};
}

std::vector<std::string> split_dotted(const std::string& key) {
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw ConfigError("malformed config key '" + key + "'");
    parts.push_back(part);
  }
  if (parts.empty()) throw ConfigError("empty config key");
  return parts;
}

// Rejects keys absent from the defaults so typos never pass silently.
void check_known(const Json& defaults, const Json& doc, const std::string& where) {
  for (const auto& [key, value] : doc.items()) {
    const auto path = where.empty() ? key : where + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (value.is_object() && defaults.at(key).is_object()) check_known(defaults.at(key), value, path);
  }
}

template <typename T>
T get(const Json& doc, const char* key, const std::string& where) {
  try {
    return doc.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + where + key + "' has the wrong type");
  }
}

TrainPlan parse_plan(const Json& j, TrainStage stage, const std::string& where) {
  TrainPlan p;
  p.stage = stage;
  p.epochs = get<std::int64_t>(j, "epochs", where);
  p.lr = get<double>(j, "lr", where);
  p.backbone_lr = get<double>(j, "backbone_lr", where);
  p.batch_size = get<std::int64_t>(j, "batch_size", where);
  p.min_steps = get<std::int64_t>(j, "min_steps", where);
  p.weight_decay = get<double>(j, "weight_decay", where);
  p.pooling = pooling_method_from_string(get<std::string>(j, "pooling", where));
  p.validate();
  return p;
}

}  // namespace

DenoiserConfig RunConfig::architecture() const {
  auto c = profile == "paper" ? DenoiserConfig::paper() : DenoiserConfig::desk();
  c.input = data.resolution;
  c.validate();
  return c;
}

NoiseSchedule RunConfig::schedule() const { return build_schedule(timesteps, beta_start, beta_end); }

Json default_config_json() {
  std::vector<std::string> blocks = {"mid_0", "mid_1", "mid_2"};
  return Json{
      {"profile", "desk"},
      {"seed", 0},
      {"noise_seed", 0},
      {"dataset", ""},
      {"data",
       {{"patients", 64},
        {"labels", 4},
        {"structures", 4},
        {"label_effect_strength", 0.5},
        {"noise_floor", 0.05},
        {"multi_scan_fraction", 0.1},
        {"label_prevalence", 0.4},
        {"split", {0.8, 0.1, 0.1}}}},
      {"diffusion", {{"timesteps", kDefaultTimesteps}, {"beta_start", kDefaultBetaStart}, {"beta_end", kDefaultBetaEnd}}},
      {"pretrain", {{"steps", 300}, {"batch_size", 8}, {"base_lr", 1e-5}}},
      {"probe", plan_json(5e-4, 5e-4 * 0.05, 10)},
      {"finetune", plan_json(5e-4, 5e-4 * 0.05, 10)},
      {"fuse", plan_json(5e-5, 0.0, 10)},
      {"segment", plan_json(1e-3, 5e-4 * 0.05, 10)},
      {"segment_orientation", "sagittal"},
      {"segment_tap", "t50:mid_2"},
      {"taps", {{"sagittal", "t50:mid_0"}, {"coronal", "t100:mid_2"}, {"axial", "t50:mid_0"}}},
      {"tap_grid", {{"timesteps", paper_timestep_grid()}, {"blocks", blocks}}},
      {"top_k", 4},
      {"setting", "lp"},
      {"fusion", "simple_concat"},
      {"ehr", false},
      {"task", "diagnosis"},
      {"label_fractions", {0.1, 0.3, 0.5, 1.0}},
      {"subset_seed", 0},
      {"threshold", 0.5},
  };
}

void merge_into(Json& base, const Json& patch) {
  if (!patch.is_object()) throw ConfigError("configuration must be a JSON object");
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object()) {
      merge_into(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

void apply_override(Json& doc, const std::string& dotted_key, const std::string& value) {
  const auto parts = split_dotted(dotted_key);
  Json* node = &doc;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) {
      throw ConfigError("unknown config key '" + dotted_key + "'");
    }
    node = &(*node)[parts[i]];
  }
  if (!node->contains(parts.back())) throw ConfigError("unknown config key '" + dotted_key + "'");
  Json parsed = Json::parse(value, nullptr, false);
  (*node)[parts.back()] = parsed.is_discarded() ? Json(value) : parsed;
}

RunConfig parse_config(const Json& doc) {
  check_known(default_config_json(), doc, "");
  RunConfig c;
  try {
    c.profile = get<std::string>(doc, "profile", "");
    if (c.profile != "desk" && c.profile != "paper") throw ConfigError("profile must be desk or paper");
    c.seed = get<std::uint64_t>(doc, "seed", "");
    c.noise_seed = get<std::uint64_t>(doc, "noise_seed", "");
    c.dataset = get<std::string>(doc, "dataset", "");

    const auto& d = doc.at("data");
    c.data.n_patients = get<std::int64_t>(d, "patients", "data.");
    c.data.resolution = c.profile == "paper" ? kPaperResolution : kDeskResolution;
    c.data.n_labels = get<int>(d, "labels", "data.");
    c.data.n_structures = get<int>(d, "structures", "data.");
    c.data.label_effect_strength = get<double>(d, "label_effect_strength", "data.");
    c.data.noise_floor = get<double>(d, "noise_floor", "data.");
    c.data.multi_scan_fraction = get<double>(d, "multi_scan_fraction", "data.");
    c.data.label_prevalence = get<double>(d, "label_prevalence", "data.");
    c.data.seed = c.seed;
    auto split = get<std::vector<double>>(d, "split", "data.");
    if (split.size() != 3) throw ConfigError("data.split needs three fractions");
    c.split = SplitFractions{split[0], split[1], split[2]};
    c.data.validate();

    const auto& diff = doc.at("diffusion");
    c.timesteps = get<std::int64_t>(diff, "timesteps", "diffusion.");
    c.beta_start = get<double>(diff, "beta_start", "diffusion.");
    c.beta_end = get<double>(diff, "beta_end", "diffusion.");
    c.schedule().validate();

    const auto& pt = doc.at("pretrain");
    c.pretrain.steps = get<std::int64_t>(pt, "steps", "pretrain.");
    c.pretrain.batch_size = get<std::int64_t>(pt, "batch_size", "pretrain.");
    c.pretrain.base_lr = get<double>(pt, "base_lr", "pretrain.");
    c.pretrain.validate();

    c.probe = parse_plan(doc.at("probe"), TrainStage::kStage1LP, "probe.");
    c.finetune = parse_plan(doc.at("finetune"), TrainStage::kStage1FT, "finetune.");
    c.fuse = parse_plan(doc.at("fuse"), TrainStage::kStage2Fusion, "fuse.");
    c.segment = parse_plan(doc.at("segment"), TrainStage::kSegFT, "segment.");
    for (auto* p : {&c.probe, &c.finetune, &c.fuse, &c.segment}) {
      p->seed = c.seed;
      p->noise_seed = c.noise_seed;
    }
    c.segment_orientation = orientation_from_string(get<std::string>(doc, "segment_orientation", ""));
    c.segment_tap = TapPoint::parse(get<std::string>(doc, "segment_tap", ""));

    const auto& taps = doc.at("taps");
    if (taps.is_string()) {
      if (taps.get<std::string>() != "selected") throw ConfigError("taps must be an object or \"selected\"");
    } else {
      std::array<TapPoint, 3> t;
      for (auto o : kOrientations) t[index_of(o)] = TapPoint::parse(get<std::string>(taps, std::string(to_string(o)).c_str(), "taps."));
      c.taps = t;
    }
    const auto& grid = doc.at("tap_grid");
    c.grid_timesteps = get<std::vector<std::int64_t>>(grid, "timesteps", "tap_grid.");
    for (const auto& b : get<std::vector<std::string>>(grid, "blocks", "tap_grid.")) {
      c.grid_blocks.push_back(bottleneck_block_from_string(b));
    }
    for (auto t : c.grid_timesteps) {
      if (t < 0 || t >= c.timesteps) throw ConfigError("tap_grid timestep " + std::to_string(t) + " outside the schedule");
    }
    if (c.grid_blocks.empty() || c.grid_timesteps.empty()) throw ConfigError("tap_grid must not be empty");
    c.top_k = get<std::size_t>(doc, "top_k", "");
    if (c.top_k == 0) throw ConfigError("top_k must be positive");
    if (c.top_k > c.grid_timesteps.size() * c.grid_blocks.size()) {
      throw ConfigError("top_k " + std::to_string(c.top_k) + " exceeds the " +
                        std::to_string(c.grid_timesteps.size() * c.grid_blocks.size()) + " taps in tap_grid");
    }

    c.setting = probe_setting_from_string(get<std::string>(doc, "setting", ""));
    c.fusion = fusion_strategy_from_string(get<std::string>(doc, "fusion", ""));
    c.ehr = get<bool>(doc, "ehr", "");
    c.task = get<std::string>(doc, "task", "");
    if (c.task != "diagnosis" && c.task != "segmentation") throw ConfigError("task must be diagnosis or segmentation");
    c.label_fractions = get<std::vector<double>>(doc, "label_fractions", "");
    for (std::size_t i = 0; i < c.label_fractions.size(); ++i) {
      const double f = c.label_fractions[i];
      if (!(f > 0.0 && f <= 1.0)) throw ConfigError("label fractions must lie in (0, 1]");
      if (i > 0 && f <= c.label_fractions[i - 1]) throw ConfigError("label fractions must be strictly ascending");
    }
    c.subset_seed = get<std::uint64_t>(doc, "subset_seed", "");
    c.threshold = get<double>(doc, "threshold", "");
    if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
    c.architecture();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

}  // namespace orthodiff::cli
