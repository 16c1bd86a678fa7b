#include "orthodiff/schedule.hpp"

#include <cmath>
#include <string>

#include "orthodiff/errors.hpp"

namespace orthodiff {

void NoiseSchedule::validate() const {
  if (T <= 0 || beta.size() != static_cast<std::size_t>(T) || alpha_bar.size() != beta.size()) {
    throw ValidationError("noise schedule arrays must have length T > 0");
  }
  for (std::int64_t t = 0; t < T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    if (!(beta[i] > 0.0 && beta[i] < 1.0)) throw ValidationError("beta outside (0, 1)");
    if (!(alpha_bar[i] > 0.0 && alpha_bar[i] < 1.0)) throw ValidationError("alpha_bar outside (0, 1)");
    if (i > 0 && !(alpha_bar[i] < alpha_bar[i - 1])) {
      throw ValidationError("alpha_bar must be strictly decreasing");
    }
  }
}

NoiseSchedule build_schedule(std::int64_t T, double beta_start, double beta_end) {
  if (T <= 0) throw ValidationError("T must be positive, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ValidationError("require 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha_bar.resize(static_cast<std::size_t>(T));
  double prod = 1.0;
  for (std::int64_t t = 0; t < T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - b;
    s.beta[static_cast<std::size_t>(t)] = b;
    s.alpha_bar[static_cast<std::size_t>(t)] = prod;
  }
  s.validate();
  return s;
}

NoiseSchedule build_scaled_schedule(std::int64_t T) {
  if (T <= 0) throw ValidationError("T must be positive");
  const double scale = static_cast<double>(kDefaultTimesteps) / static_cast<double>(T);
  return build_schedule(T, std::min(kDefaultBetaStart * scale, kDefaultBetaEnd), kDefaultBetaEnd);
}

torch::Tensor forward_noise(const torch::Tensor& x0, std::int64_t t, const torch::Tensor& eps,
                            const NoiseSchedule& sched) {
  if (!x0.sizes().equals(eps.sizes())) throw ShapeError("forward_noise: eps shape differs from x0");
  if (t < 0 || t >= sched.T) throw ValidationError("timestep out of range");
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor forward_noise(const torch::Tensor& x0, const torch::Tensor& t,
                            const torch::Tensor& eps, const NoiseSchedule& sched) {
  if (!x0.sizes().equals(eps.sizes())) throw ShapeError("forward_noise: eps shape differs from x0");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw ShapeError("one timestep per sample expected");
  auto table = torch::tensor(sched.alpha_bar, torch::kFloat64).to(x0.scalar_type());
  auto idx = t.to(torch::kLong);
  if (idx.min().item<std::int64_t>() < 0 || idx.max().item<std::int64_t>() >= sched.T) {
    throw ValidationError("timestep out of range");
  }
  std::vector<std::int64_t> view(static_cast<std::size_t>(x0.dim()), 1);
  view[0] = x0.size(0);
  auto ab = table.index_select(0, idx).view(view);
  return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
}

}  // namespace orthodiff
