#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "orthodiff/denoiser.hpp"
#include "orthodiff/schedule.hpp"
#include "orthodiff/synth.hpp"

namespace orthodiff {

struct PretrainConfig {
  std::int64_t batch_size = 8;
  // Learning rate per sample; the optimiser uses base_lr * batch_size.
  double base_lr = 1e-5;
  std::int64_t steps = 300;
  std::uint64_t seed = 0;

  double learning_rate() const { return base_lr * static_cast<double>(batch_size); }
  void validate() const;
};

struct LossPoint {
  std::int64_t step = 0;
  double loss = 0.0;
};

struct PretrainResult {
  UNet3D model{nullptr};
  std::vector<LossPoint> loss_curve;
};

// All training-split volumes of one orientation stacked as (N, 1, D, H, W).
torch::Tensor training_volumes(const DatasetIndex& dataset, Orientation o);

// Mean over batch and voxels of (eps - prediction)^2 for one noised batch.
torch::Tensor denoising_loss(UNet3D& model, const torch::Tensor& x0, const torch::Tensor& t,
                             const torch::Tensor& eps, const NoiseSchedule& sched);

// Minimises the noise-prediction objective with Adam at base_lr * batch_size.
// `model` may be supplied (e.g. with the zero-output hook set); otherwise a fresh
// denoiser seeded from cfg.seed is built from `arch`.
PretrainResult pretrain(const DatasetIndex& dataset, Orientation o, const PretrainConfig& cfg,
                        const NoiseSchedule& sched, const DenoiserConfig& arch,
                        UNet3D model = nullptr);

std::string loss_curve_csv(const std::vector<LossPoint>& curve);

// Unconditional ancestral sampler (smoke test only): starts from N(0, I) and runs
// the reverse chain with sigma_t^2 = beta_t.
torch::Tensor ancestral_sample(UNet3D& model, const NoiseSchedule& sched, std::int64_t n,
                               std::uint64_t seed);

}  // namespace orthodiff
