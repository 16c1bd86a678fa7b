#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "orthodiff/types.hpp"

namespace orthodiff {

struct DenoiserConfig {
  std::int64_t base_channels = 16;
  std::vector<std::int64_t> channel_multipliers = {1, 2, 2};
  std::int64_t blocks_per_level = 1;
  // Self-attention is inserted at levels whose in-plane height equals this value.
  std::int64_t attention_resolution = 8;
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  Resolution input = kDeskResolution;

  static DenoiserConfig desk();
  static DenoiserConfig paper();

  void validate() const;
  std::int64_t bottleneck_channels() const;
  // (C, D', H', W') of the middle blocks for this input resolution.
  std::array<std::int64_t, 4> bottleneck_shape() const;
};

enum class BottleneckBlock : std::uint8_t { kMid0 = 0, kMid1 = 1, kMid2 = 2 };

std::string_view to_string(BottleneckBlock b);
BottleneckBlock bottleneck_block_from_string(std::string_view name);

torch::Tensor sinusoidal_embedding(const torch::Tensor& timesteps, std::int64_t dim);

// Residual block: GN -> SiLU -> conv -> (+ time shift) -> GN -> SiLU -> conv, plus skip.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t emb_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv3d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear emb_proj_{nullptr};
  torch::nn::Conv3d skip_{nullptr};
};
TORCH_MODULE(ResBlock);

// Single-head spatial self-attention with a residual connection.
class SpatialAttentionImpl : public torch::nn::Module {
 public:
  explicit SpatialAttentionImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Conv3d qkv_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(SpatialAttention);

struct EncoderOutput {
  torch::Tensor embedding;            // timestep embedding, (B, E)
  std::vector<torch::Tensor> skips;   // one per level, finest first
  std::array<torch::Tensor, 3> mid;   // outputs of mid_0, mid_1, mid_2
};

// 3D U-Net noise predictor eps_theta(x_t, t).
//
// Parameter names follow `<part>.<level>.<block>.<tensor>`; `part` is one of
// time_mlp, input, enc, down, mid, dec, up, output. Encoder, bottleneck and the
// timestep MLP form the trainable set during fine-tuning; dec/up/output form the
// decoder.
class UNet3DImpl : public torch::nn::Module {
 public:
  explicit UNet3DImpl(DenoiserConfig config);

  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t);
  // Runs the encoder and the three bottleneck blocks only.
  EncoderOutput encode(const torch::Tensor& x_t, const torch::Tensor& t);

  const DenoiserConfig& config() const { return config_; }

  std::vector<torch::Tensor> encoder_parameters();
  std::vector<torch::Tensor> decoder_parameters();
  static bool is_decoder_parameter(const std::string& name);

  // Ablation hook: when set, forward() returns zeros of the input shape.
  void set_zero_output(bool on) { zero_output_ = on; }

 private:
  DenoiserConfig config_;
  std::int64_t emb_dim_ = 0;
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv3d input_{nullptr};
  torch::nn::ModuleList enc_{nullptr};
  torch::nn::ModuleList enc_attn_{nullptr};
  torch::nn::ModuleList down_{nullptr};
  ResBlock mid0_{nullptr};
  SpatialAttention mid1_{nullptr};
  ResBlock mid2_{nullptr};
  torch::nn::ModuleList dec_{nullptr};
  torch::nn::ModuleList dec_attn_{nullptr};
  torch::nn::ModuleList up_{nullptr};
  torch::nn::GroupNorm out_norm_{nullptr};
  torch::nn::Conv3d out_conv_{nullptr};
  std::vector<bool> level_attention_;
  bool zero_output_ = false;
};
TORCH_MODULE(UNet3D);

// Deterministic construction: parameters are drawn from a generator seeded by `seed`.
UNet3D make_denoiser(const DenoiserConfig& config, std::uint64_t seed);

void check_finite(const torch::Tensor& t, const std::string& what);

}  // namespace orthodiff
