#include "orthodiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "orthodiff/errors.hpp"
#include "orthodiff/hashing.hpp"

namespace orthodiff {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "tensor files are written in host byte order");

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> buf(expected);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
  if (in.gcount() != static_cast<std::streamsize>(expected) || in.peek() != std::char_traits<char>::eof()) {
    throw ShapeError(path.string() + " does not hold " + std::to_string(expected) + " bytes");
  }
  return buf;
}

void write_bytes(const fs::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw Error("failed to write " + path.string());
}

ordered_json config_json(const DenoiserConfig& c) {
  return ordered_json{{"base_channels", c.base_channels},
                      {"channel_multipliers", c.channel_multipliers},
                      {"blocks_per_level", c.blocks_per_level},
                      {"attention_resolution", c.attention_resolution},
                      {"in_channels", c.in_channels},
                      {"out_channels", c.out_channels},
                      {"input", {c.input.depth, c.input.height, c.input.width}}};
}

DenoiserConfig config_from_json(const ordered_json& j) {
  DenoiserConfig c;
  c.base_channels = j.at("base_channels").get<std::int64_t>();
  c.channel_multipliers = j.at("channel_multipliers").get<std::vector<std::int64_t>>();
  c.blocks_per_level = j.at("blocks_per_level").get<std::int64_t>();
  c.attention_resolution = j.at("attention_resolution").get<std::int64_t>();
  c.in_channels = j.at("in_channels").get<std::int64_t>();
  c.out_channels = j.at("out_channels").get<std::int64_t>();
  auto in = j.at("input").get<std::vector<std::int64_t>>();
  if (in.size() != 3) throw ConfigError("checkpoint input shape must have three entries");
  c.input = Resolution{in[0], in[1], in[2]};
  c.validate();
  return c;
}

std::map<std::string, torch::Tensor> tensor_table(torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : module.named_parameters()) out.emplace(p.key(), p.value());
  for (const auto& b : module.named_buffers()) out.emplace(b.key(), b.value());
  return out;
}

}  // namespace

void write_f32le(const fs::path& path, const torch::Tensor& t) {
  auto data = t.detach().to(torch::kCPU).to(torch::kFloat32).contiguous();
  write_bytes(path, data.data_ptr(), data.nbytes());
}

torch::Tensor read_f32le(const fs::path& path, c10::IntArrayRef shape) {
  auto out = torch::empty(shape, torch::TensorOptions().dtype(torch::kFloat32));
  auto buf = read_bytes(path, out.nbytes());
  std::memcpy(out.data_ptr(), buf.data(), buf.size());
  return out;
}

void write_u8(const fs::path& path, const torch::Tensor& t) {
  auto data = t.detach().to(torch::kCPU).to(torch::kUInt8).contiguous();
  write_bytes(path, data.data_ptr(), data.nbytes());
}

torch::Tensor read_u8(const fs::path& path, c10::IntArrayRef shape) {
  auto out = torch::empty(shape, torch::TensorOptions().dtype(torch::kUInt8));
  auto buf = read_bytes(path, out.nbytes());
  std::memcpy(out.data_ptr(), buf.data(), buf.size());
  return out;
}

std::string save_module_tensors(torch::nn::Module& module, const fs::path& dir, const std::string& manifest_name,
                                const std::string& extra_json) {
  fs::create_directories(dir);
  ordered_json manifest = ordered_json::parse(extra_json.empty() ? "{}" : extra_json);
  if (!manifest.is_object()) throw ValidationError("extra manifest content must be a JSON object");
  Fnv1a hash;
  ordered_json tensors = ordered_json::array();
  for (const auto& [name, t] : tensor_table(module)) {
    const auto file = name + ".f32";
    write_f32le(dir / file, t);
    auto data = t.detach().to(torch::kFloat32).contiguous();
    hash.update(name);
    hash.update(std::as_bytes(std::span<const char>(static_cast<const char*>(data.data_ptr()), data.nbytes())));
    tensors.push_back({{"name", name}, {"file", file}, {"shape", t.sizes().vec()}, {"dtype", "f32le"}});
  }
  manifest["tensors"] = tensors;
  manifest["content_hash"] = hash.hex();
  std::ofstream out(dir / manifest_name, std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw Error("failed to write manifest in " + dir.string());
  return hash.hex();
}

void load_module_tensors(torch::nn::Module& module, const fs::path& dir, const std::string& manifest_name) {
  std::ifstream in(dir / manifest_name);
  if (!in) throw Error("missing manifest " + (dir / manifest_name).string());
  const auto manifest = ordered_json::parse(in);
  auto table = tensor_table(module);
  std::size_t loaded = 0;
  torch::NoGradGuard no_grad;
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    auto it = table.find(name);
    if (it == table.end()) throw ShapeError("checkpoint tensor '" + name + "' has no counterpart in the module");
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    if (it->second.sizes().vec() != shape) throw ShapeError("shape mismatch for tensor '" + name + "'");
    it->second.copy_(read_f32le(dir / entry.at("file").get<std::string>(), shape));
    ++loaded;
  }
  if (loaded != table.size()) throw ShapeError("checkpoint does not cover every module tensor");
}

std::string save_checkpoint(UNet3D& model, const NoiseSchedule& sched, std::int64_t step, std::uint64_t seed,
                            const fs::path& dir) {
  ordered_json extra{{"format", "orthodiff-denoiser"},
                     {"config", config_json(model->config())},
                     {"schedule",
                      {{"T", sched.T}, {"beta_start", sched.beta.front()}, {"beta_end", sched.beta.back()}}},
                     {"step", step},
                     {"seed", seed}};
  return save_module_tensors(*model, dir, "manifest.json", extra.dump());
}

UNet3D load_checkpoint(const fs::path& dir, CheckpointInfo* info) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("missing checkpoint manifest in " + dir.string());
  const auto manifest = ordered_json::parse(in);
  auto config = config_from_json(manifest.at("config"));
  UNet3D model(config);
  load_module_tensors(*model, dir);
  model->eval();
  if (info != nullptr) {
    const auto& s = manifest.at("schedule");
    info->config = config;
    info->schedule =
        build_schedule(s.at("T").get<std::int64_t>(), s.at("beta_start").get<double>(), s.at("beta_end").get<double>());
    info->step = manifest.at("step").get<std::int64_t>();
    info->seed = manifest.at("seed").get<std::uint64_t>();
    info->content_hash = manifest.at("content_hash").get<std::string>();
  }
  return model;
}

}  // namespace orthodiff
