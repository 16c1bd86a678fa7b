#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "orthodiff/denoiser.hpp"
#include "orthodiff/pretrain.hpp"
#include "orthodiff/synth.hpp"
#include "orthodiff/training.hpp"

namespace orthodiff::cli {

using Json = nlohmann::ordered_json;

struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  std::uint64_t noise_seed = 0;
  std::string dataset;  // empty: <workspace>/data

  PhantomSpec data;
  SplitFractions split;

  std::int64_t timesteps = kDefaultTimesteps;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;

  PretrainConfig pretrain;
  TrainPlan probe;
  TrainPlan finetune;
  TrainPlan fuse;
  TrainPlan segment;
  Orientation segment_orientation = Orientation::kSagittal;
  TapPoint segment_tap{50, BottleneckBlock::kMid2};

  // Empty when taps come from the select stage.
  std::optional<std::array<TapPoint, 3>> taps;
  std::vector<std::int64_t> grid_timesteps;
  std::vector<BottleneckBlock> grid_blocks;
  std::size_t top_k = 4;

  ProbeSetting setting = ProbeSetting::kLinearProbe;
  FusionStrategy fusion = FusionStrategy::kSimpleConcat;
  bool ehr = false;
  // evaluate / labeleff target: "diagnosis" or "segmentation".
  std::string task = "diagnosis";

  std::vector<double> label_fractions;
  std::uint64_t subset_seed = 0;

  double threshold = 0.5;

  DenoiserConfig architecture() const;
  NoiseSchedule schedule() const;
  const TrainPlan& stage1_plan() const { return setting == ProbeSetting::kFineTune ? finetune : probe; }
};

// Built-in defaults as a JSON document; every key is overridable.
Json default_config_json();

// Recursive merge; objects merge key-wise, everything else replaces.
void merge_into(Json& base, const Json& patch);

// Sets a dotted key ("probe.epochs") to a value parsed as JSON, falling back to a
// string. Unknown keys are rejected.
void apply_override(Json& doc, const std::string& dotted_key, const std::string& value);

// Throws ConfigError on unknown keys, wrong types or invalid values.
RunConfig parse_config(const Json& doc);

}  // namespace orthodiff::cli
