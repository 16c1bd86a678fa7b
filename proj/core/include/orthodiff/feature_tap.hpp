#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "orthodiff/denoiser.hpp"
#include "orthodiff/schedule.hpp"
#include "orthodiff/synth.hpp"

namespace orthodiff {

struct TapPoint {
  std::int64_t timestep = 30;
  BottleneckBlock block = BottleneckBlock::kMid2;

  friend bool operator==(const TapPoint&, const TapPoint&) = default;
  // Ties in selection resolve towards the smaller timestep, then lower block.
  friend bool operator<(const TapPoint& a, const TapPoint& b) {
    if (a.timestep != b.timestep) return a.timestep < b.timestep;
    return a.block < b.block;
  }
  std::string str() const;
  static TapPoint parse(std::string_view text);  // "t50:mid_0"
};

inline const std::vector<std::int64_t>& paper_timestep_grid() {
  static const std::vector<std::int64_t> grid = {10, 30, 50, 100, 150, 200, 300, 500};
  return grid;
}

std::vector<TapPoint> tap_grid(const std::vector<std::int64_t>& timesteps,
                               const std::vector<BottleneckBlock>& blocks = {
                                   BottleneckBlock::kMid0, BottleneckBlock::kMid1,
                                   BottleneckBlock::kMid2});

struct FeatureMap {
  torch::Tensor data;  // (C', D', H', W')
  TapPoint tap;
  Orientation orientation = Orientation::kSagittal;
  std::string scan_id;
};

// Seed of the evaluation noise draw for one scan.
std::uint64_t tap_noise_seed(std::uint64_t noise_seed, const std::string& scan_id);

// Standard-normal noise shaped like x0 drawn from tap_noise_seed(noise_seed, scan_id).
torch::Tensor tap_noise(const torch::Tensor& x0, std::uint64_t noise_seed,
                        const std::string& scan_id);

FeatureMap extract_features(UNet3D& model, const VolumeTensor& x0, const TapPoint& tap,
                            const NoiseSchedule& sched, std::uint64_t noise_seed);

// Batched tap over (B, 1, D, H, W) inputs with per-sample noise already drawn.
// Gradients flow when the caller has not disabled them (fine-tuning).
torch::Tensor tap_batch(UNet3D& model, const torch::Tensor& x0, const torch::Tensor& eps,
                        const TapPoint& tap, const NoiseSchedule& sched);

// Order-sensitive digest over every named parameter's bytes.
std::string parameter_checksum(torch::nn::Module& module);
std::string parameter_checksum(torch::nn::Module& module,
                               const std::vector<std::string>& name_prefixes);

// On-disk cache of feature maps keyed by (checkpoint hash, noise seed, scan, tap).
class FeatureCache {
 public:
  FeatureCache(std::filesystem::path root, std::string checkpoint_hash, std::uint64_t noise_seed);

  std::optional<FeatureMap> load(const std::string& scan_id, const TapPoint& tap,
                                 Orientation o) const;
  void store(const FeatureMap& fm) const;
  std::filesystem::path entry_path(const std::string& scan_id, const TapPoint& tap) const;

 private:
  std::filesystem::path root_;
  std::string checkpoint_hash_;
  std::uint64_t noise_seed_;
};

}  // namespace orthodiff
