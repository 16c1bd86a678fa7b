#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <torch/torch.h>

#include "orthodiff/denoiser.hpp"
#include "orthodiff/schedule.hpp"

namespace orthodiff {

// Raw little-endian float32 tensor I/O.
void write_f32le(const std::filesystem::path& path, const torch::Tensor& t);
torch::Tensor read_f32le(const std::filesystem::path& path, c10::IntArrayRef shape);
void write_u8(const std::filesystem::path& path, const torch::Tensor& t);
torch::Tensor read_u8(const std::filesystem::path& path, c10::IntArrayRef shape);

struct CheckpointInfo {
  DenoiserConfig config;
  NoiseSchedule schedule;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::string content_hash;
};

// Directory layout: manifest.json plus one `<parameter name>.f32` file per tensor.
// Extra modules (pooling, heads) share the same tensor-table format.
std::string save_module_tensors(torch::nn::Module& module, const std::filesystem::path& dir,
                                const std::string& manifest_name = "manifest.json",
                                const std::string& extra_json = "{}");
void load_module_tensors(torch::nn::Module& module, const std::filesystem::path& dir,
                         const std::string& manifest_name = "manifest.json");

std::string save_checkpoint(UNet3D& model, const NoiseSchedule& sched, std::int64_t step,
                            std::uint64_t seed, const std::filesystem::path& dir);
// Rebuilds the denoiser from the manifest config and loads every tensor.
UNet3D load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info = nullptr);

}  // namespace orthodiff
