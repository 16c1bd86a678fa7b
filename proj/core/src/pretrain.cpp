#include "orthodiff/pretrain.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <iomanip>
#include <sstream>

#include "orthodiff/errors.hpp"

namespace orthodiff {

void PretrainConfig::validate() const {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (steps <= 0) throw ConfigError("steps must be positive");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
}

torch::Tensor training_volumes(const DatasetIndex& dataset, Orientation o) {
  std::vector<torch::Tensor> vols;
  for (const auto* rec : dataset.records_in(Split::kTrain)) {
    for (const auto& scan : rec->scans_in(o)) vols.push_back(scan.volume.data);
  }
  if (vols.empty()) {
    throw ValidationError("no training volumes in orientation " + std::string(to_string(o)));
  }
  return torch::stack(vols);
}

torch::Tensor denoising_loss(UNet3D& model, const torch::Tensor& x0, const torch::Tensor& t,
                             const torch::Tensor& eps, const NoiseSchedule& sched) {
  auto xt = forward_noise(x0, t, eps, sched);
  return torch::mse_loss(model->forward(xt, t), eps);
}

PretrainResult pretrain(const DatasetIndex& dataset, Orientation o, const PretrainConfig& cfg,
                        const NoiseSchedule& sched, const DenoiserConfig& arch, UNet3D model) {
  cfg.validate();
  sched.validate();
  auto volumes = training_volumes(dataset, o);
  if (!model) model = make_denoiser(arch, cfg.seed);
  model->train();
  volumes = volumes.to(model->parameters().front().scalar_type());

  const double lr = cfg.learning_rate();
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(lr));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto n = volumes.size(0);

  PretrainResult result;
  result.loss_curve.reserve(static_cast<std::size_t>(cfg.steps));
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    auto idx = torch::randint(n, {cfg.batch_size}, gen, torch::kInt64);
    auto t = torch::randint(sched.T, {cfg.batch_size}, gen, torch::kInt64);
    auto x0 = volumes.index_select(0, idx);
    auto eps = torch::randn(x0.sizes(), gen, x0.options());
    auto loss = denoising_loss(model, x0, t, eps, sched);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      std::ostringstream msg;
      msg << "non-finite pretraining loss at step " << step << " (lr " << lr << ")";
      throw NumericError(msg.str());
    }
    // The zero-output hook leaves nothing to differentiate.
    if (loss.requires_grad()) {
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
    for (const auto& p : model->parameters()) {
      if (!torch::isfinite(p).all().item<bool>()) {
        std::ostringstream msg;
        msg << "non-finite parameter after step " << step << " (lr " << lr << ")";
        throw NumericError(msg.str());
      }
    }
    result.loss_curve.push_back({step, value});
  }
  model->eval();
  result.model = model;
  return result;
}

std::string loss_curve_csv(const std::vector<LossPoint>& curve) {
  std::ostringstream out;
  out << "step,loss\n" << std::setprecision(17);
  for (const auto& p : curve) out << p.step << ',' << p.loss << '\n';
  return out.str();
}

torch::Tensor ancestral_sample(UNet3D& model, const NoiseSchedule& sched, std::int64_t n,
                               std::uint64_t seed) {
  if (n <= 0) throw ValidationError("sample count must be positive");
  torch::NoGradGuard no_grad;
  const auto& in = model->config().input;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto opts = model->parameters().front().options();
  auto x = torch::randn({n, 1, in.depth, in.height, in.width}, gen, opts);
  for (std::int64_t t = sched.T - 1; t >= 0; --t) {
    const auto ti = static_cast<std::size_t>(t);
    const double beta = sched.beta[ti];
    const double ab = sched.alpha_bar[ti];
    auto eps = model->forward(x, torch::full({n}, t, torch::kInt64));
    x = (x - beta / std::sqrt(1.0 - ab) * eps) / std::sqrt(1.0 - beta);
    if (t > 0) x = x + std::sqrt(beta) * torch::randn(x.sizes(), gen, opts);
  }
  return x;
}

}  // namespace orthodiff
