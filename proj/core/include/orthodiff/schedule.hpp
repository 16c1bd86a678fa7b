#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace orthodiff {

// Linear-beta Gaussian diffusion schedule. alpha_bar[t] is the cumulative product
// of (1 - beta[s]) for s <= t, i.e. the signal fraction of the closed-form marginal.
struct NoiseSchedule {
  std::int64_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  void validate() const;
};

inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;
inline constexpr std::int64_t kDefaultTimesteps = 1000;

NoiseSchedule build_schedule(std::int64_t T, double beta_start = kDefaultBetaStart,
                             double beta_end = kDefaultBetaEnd);

// Shorter chains keep beta_end and rescale beta_start by T_ref/T so the linear
// ramp spans the same noise range.
NoiseSchedule build_scaled_schedule(std::int64_t T);

// sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps, elementwise.
torch::Tensor forward_noise(const torch::Tensor& x0, std::int64_t t, const torch::Tensor& eps,
                            const NoiseSchedule& sched);

// Batched variant: one timestep per leading-dimension entry.
torch::Tensor forward_noise(const torch::Tensor& x0, const torch::Tensor& t,
                            const torch::Tensor& eps, const NoiseSchedule& sched);

}  // namespace orthodiff
