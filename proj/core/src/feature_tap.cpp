#include "orthodiff/feature_tap.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cstring>
#include <fstream>

#include "orthodiff/errors.hpp"
#include "orthodiff/hashing.hpp"

namespace orthodiff {

namespace {

constexpr char kCacheMagic[4] = {'O', 'D', 'F', 'M'};

std::string safe_component(const std::string& text) {
  std::string out;
  for (char c : text) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
                    c == '-' || c == '.';
    out.push_back(ok ? c : '_');
  }
  return out;
}

}  // namespace

std::string TapPoint::str() const {
  return "t" + std::to_string(timestep) + ":" + std::string(to_string(block));
}

TapPoint TapPoint::parse(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos || text.empty() || text.front() != 't') {
    throw ValidationError("tap must look like 't50:mid_0', got '" + std::string(text) + "'");
  }
  TapPoint tap;
  const std::string digits(text.substr(1, colon - 1));
  if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) {
    throw ValidationError("bad tap timestep in '" + std::string(text) + "'");
  }
  tap.timestep = std::stoll(digits);
  tap.block = bottleneck_block_from_string(text.substr(colon + 1));
  return tap;
}

std::vector<TapPoint> tap_grid(const std::vector<std::int64_t>& timesteps,
                               const std::vector<BottleneckBlock>& blocks) {
  std::vector<TapPoint> grid;
  for (auto t : timesteps) {
    for (auto b : blocks) grid.push_back({t, b});
  }
  return grid;
}

std::uint64_t tap_noise_seed(std::uint64_t noise_seed, const std::string& scan_id) {
  return mix_seed(noise_seed, fnv1a(scan_id));
}

torch::Tensor tap_noise(const torch::Tensor& x0, std::uint64_t noise_seed, const std::string& scan_id) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(tap_noise_seed(noise_seed, scan_id));
  return torch::randn(x0.sizes(), gen, x0.options());
}

torch::Tensor tap_batch(UNet3D& model, const torch::Tensor& x0, const torch::Tensor& eps,
                        const TapPoint& tap, const NoiseSchedule& sched) {
  if (tap.timestep < 0 || tap.timestep >= sched.T) {
    throw ValidationError("tap timestep " + std::to_string(tap.timestep) + " outside [0, " +
                          std::to_string(sched.T) + ")");
  }
  auto xt = forward_noise(x0, tap.timestep, eps, sched);
  auto t = torch::full({x0.size(0)}, tap.timestep, torch::TensorOptions().dtype(torch::kInt64));
  auto out = model->encode(xt, t);
  return out.mid[static_cast<std::size_t>(tap.block)];
}

FeatureMap extract_features(UNet3D& model, const VolumeTensor& x0, const TapPoint& tap,
                            const NoiseSchedule& sched, std::uint64_t noise_seed) {
  if (x0.data.dim() != 4) throw ShapeError("volume must have shape (1, D, H, W)");
  torch::NoGradGuard no_grad;
  auto batch = x0.data.unsqueeze(0).to(model->parameters().front().scalar_type());
  auto eps = tap_noise(batch, noise_seed, x0.scan_id);
  auto feats = tap_batch(model, batch, eps, tap, sched);
  return FeatureMap{feats.squeeze(0).contiguous(), tap, x0.orientation, x0.scan_id};
}

std::string parameter_checksum(torch::nn::Module& module) { return parameter_checksum(module, {}); }

std::string parameter_checksum(torch::nn::Module& module, const std::vector<std::string>& name_prefixes) {
  Fnv1a h;
  for (const auto& p : module.named_parameters()) {
    if (!name_prefixes.empty()) {
      bool keep = false;
      for (const auto& prefix : name_prefixes) keep = keep || p.key().rfind(prefix, 0) == 0;
      if (!keep) continue;
    }
    auto t = p.value().detach().contiguous();
    h.update(p.key());
    h.update(std::as_bytes(std::span<const char>(static_cast<const char*>(t.data_ptr()), t.nbytes())));
  }
  return h.hex();
}

FeatureCache::FeatureCache(std::filesystem::path root, std::string checkpoint_hash, std::uint64_t noise_seed)
    : root_(std::move(root)), checkpoint_hash_(std::move(checkpoint_hash)), noise_seed_(noise_seed) {}

std::filesystem::path FeatureCache::entry_path(const std::string& scan_id, const TapPoint& tap) const {
  return root_ / safe_component(checkpoint_hash_) / to_hex(noise_seed_) /
         ("t" + std::to_string(tap.timestep) + "_" + std::string(to_string(tap.block))) /
         (safe_component(scan_id) + ".feat");
}

std::optional<FeatureMap> FeatureCache::load(const std::string& scan_id, const TapPoint& tap,
                                             Orientation o) const {
  std::ifstream in(entry_path(scan_id, tap), std::ios::binary);
  if (!in) return std::nullopt;
  char magic[4];
  std::int64_t ndim = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&ndim), sizeof(ndim));
  if (!in || std::memcmp(magic, kCacheMagic, 4) != 0 || ndim <= 0 || ndim > 8) return std::nullopt;
  std::vector<std::int64_t> shape(static_cast<std::size_t>(ndim));
  in.read(reinterpret_cast<char*>(shape.data()), static_cast<std::streamsize>(ndim * sizeof(std::int64_t)));
  std::int64_t numel = 1;
  for (auto s : shape) numel *= s;
  auto data = torch::empty(shape, torch::TensorOptions().dtype(torch::kFloat32));
  in.read(static_cast<char*>(data.data_ptr()), static_cast<std::streamsize>(numel * sizeof(float)));
  if (!in) return std::nullopt;
  return FeatureMap{data, tap, o, scan_id};
}

void FeatureCache::store(const FeatureMap& fm) const {
  const auto path = entry_path(fm.scan_id, fm.tap);
  std::filesystem::create_directories(path.parent_path());
  auto data = fm.data.detach().to(torch::kFloat32).contiguous();
  const std::int64_t ndim = data.dim();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(kCacheMagic, 4);
    out.write(reinterpret_cast<const char*>(&ndim), sizeof(ndim));
    for (auto s : data.sizes()) out.write(reinterpret_cast<const char*>(&s), sizeof(s));
    out.write(static_cast<const char*>(data.data_ptr()), static_cast<std::streamsize>(data.nbytes()));
    if (!out) throw Error("failed to write feature cache entry " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace orthodiff
