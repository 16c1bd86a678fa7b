#include "orthodiff/denoiser.hpp"

#include <cmath>
#include <string>

#include "orthodiff/errors.hpp"

namespace orthodiff {

namespace F = torch::nn::functional;

namespace {

std::int64_t norm_groups(std::int64_t channels) {
  for (std::int64_t g : {8, 4, 2, 1}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

torch::nn::Conv3d conv3(std::int64_t in, std::int64_t out, std::int64_t stride = 1) {
  return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).stride(stride).padding(1));
}

torch::nn::Conv3d conv1(std::int64_t in, std::int64_t out) {
  return torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 1));
}

}  // namespace

DenoiserConfig DenoiserConfig::desk() { return DenoiserConfig{}; }

DenoiserConfig DenoiserConfig::paper() {
  DenoiserConfig c;
  c.base_channels = 64;
  c.channel_multipliers = {1, 1, 2, 2, 4};
  c.blocks_per_level = 1;
  c.attention_resolution = 16;
  c.input = kPaperResolution;
  return c;
}

void DenoiserConfig::validate() const {
  if (channel_multipliers.size() < 2) throw ConfigError("need at least two resolution levels");
  if (base_channels <= 0 || blocks_per_level <= 0) throw ConfigError("channel/block counts must be positive");
  if (in_channels != 1 || out_channels != 1) throw ConfigError("denoiser is single-channel");
  for (auto m : channel_multipliers) {
    if (m <= 0) throw ConfigError("channel multipliers must be positive");
  }
  const auto factor = std::int64_t{1} << (channel_multipliers.size() - 1);
  for (auto extent : {input.depth, input.height, input.width}) {
    if (extent <= 0 || extent % factor != 0) {
      throw ConfigError("input extents must be divisible by " + std::to_string(factor));
    }
  }
}

std::int64_t DenoiserConfig::bottleneck_channels() const {
  return base_channels * channel_multipliers.back();
}

std::array<std::int64_t, 4> DenoiserConfig::bottleneck_shape() const {
  const auto factor = std::int64_t{1} << (channel_multipliers.size() - 1);
  return {bottleneck_channels(), input.depth / factor, input.height / factor, input.width / factor};
}

std::string_view to_string(BottleneckBlock b) {
  switch (b) {
    case BottleneckBlock::kMid0: return "mid_0";
    case BottleneckBlock::kMid1: return "mid_1";
    case BottleneckBlock::kMid2: return "mid_2";
  }
  return "mid_0";
}

BottleneckBlock bottleneck_block_from_string(std::string_view name) {
  if (name == "mid_0" || name == "mid0") return BottleneckBlock::kMid0;
  if (name == "mid_1" || name == "mid1") return BottleneckBlock::kMid1;
  if (name == "mid_2" || name == "mid2") return BottleneckBlock::kMid2;
  throw ValidationError("unknown bottleneck block '" + std::string(name) + "'");
}

torch::Tensor sinusoidal_embedding(const torch::Tensor& timesteps, std::int64_t dim) {
  const std::int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) *
                          torch::arange(half, torch::TensorOptions().dtype(torch::kFloat64)) /
                          static_cast<double>(half));
  auto args = timesteps.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  if (dim % 2 == 1) emb = F::pad(emb, F::PadFuncOptions({0, 1}));
  return emb;
}

ResBlockImpl::ResBlockImpl(std::int64_t in_ch, std::int64_t out_ch, std::int64_t emb_dim) {
  norm1_ = register_module("norm1", torch::nn::GroupNorm(norm_groups(in_ch), in_ch));
  conv1_ = register_module("conv1", conv3(in_ch, out_ch));
  emb_proj_ = register_module("emb_proj", torch::nn::Linear(emb_dim, out_ch));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(norm_groups(out_ch), out_ch));
  conv2_ = register_module("conv2", conv3(out_ch, out_ch));
  if (in_ch != out_ch) skip_ = register_module("skip", conv1(in_ch, out_ch));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1_->forward(torch::silu(norm1_->forward(x)));
  h = h + emb_proj_->forward(emb).unsqueeze(-1).unsqueeze(-1).unsqueeze(-1);
  h = conv2_->forward(torch::silu(norm2_->forward(h)));
  return h + (skip_ ? skip_->forward(x) : x);
}

SpatialAttentionImpl::SpatialAttentionImpl(std::int64_t channels) {
  norm_ = register_module("norm", torch::nn::GroupNorm(norm_groups(channels), channels));
  qkv_ = register_module("qkv", conv1(channels, 3 * channels));
  proj_ = register_module("proj", conv1(channels, channels));
}

torch::Tensor SpatialAttentionImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0);
  const auto c = x.size(1);
  auto qkv = qkv_->forward(norm_->forward(x)).reshape({b, 3, c, -1});
  auto q = qkv.select(1, 0);
  auto k = qkv.select(1, 1);
  auto v = qkv.select(1, 2);
  auto attn = torch::softmax(torch::bmm(q.transpose(1, 2), k) / std::sqrt(static_cast<double>(c)), -1);
  auto out = torch::bmm(v, attn.transpose(1, 2)).reshape(x.sizes());
  return x + proj_->forward(out);
}

UNet3DImpl::UNet3DImpl(DenoiserConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto base = config_.base_channels;
  const auto levels = static_cast<std::int64_t>(config_.channel_multipliers.size());
  emb_dim_ = 4 * base;

  time_mlp_ = register_module(
      "time_mlp", torch::nn::Sequential(torch::nn::Linear(base, emb_dim_), torch::nn::SiLU(),
                                        torch::nn::Linear(emb_dim_, emb_dim_)));
  input_ = register_module("input", conv3(config_.in_channels, base));

  std::vector<std::int64_t> ch;
  for (auto m : config_.channel_multipliers) ch.push_back(base * m);

  enc_ = register_module("enc", torch::nn::ModuleList());
  enc_attn_ = register_module("enc_attn", torch::nn::ModuleList());
  down_ = register_module("down", torch::nn::ModuleList());
  std::int64_t cur = base;
  std::int64_t height = config_.input.height;
  for (std::int64_t i = 0; i < levels; ++i) {
    torch::nn::ModuleList blocks;
    for (std::int64_t b = 0; b < config_.blocks_per_level; ++b) {
      blocks->push_back(ResBlock(cur, ch[static_cast<std::size_t>(i)], emb_dim_));
      cur = ch[static_cast<std::size_t>(i)];
    }
    enc_->push_back(blocks);
    const bool attend = height == config_.attention_resolution;
    level_attention_.push_back(attend);
    // Levels without attention hold an identity placeholder so indices stay aligned.
    if (attend) enc_attn_->push_back(SpatialAttention(cur));
    else enc_attn_->push_back(torch::nn::Identity());
    if (i + 1 < levels) {
      down_->push_back(conv3(cur, cur, 2));
      height /= 2;
    }
  }

  mid0_ = ResBlock(cur, cur, emb_dim_);
  mid1_ = SpatialAttention(cur);
  mid2_ = ResBlock(cur, cur, emb_dim_);
  torch::nn::ModuleList mid;
  mid->push_back(mid0_);
  mid->push_back(mid1_);
  mid->push_back(mid2_);
  register_module("mid", mid);

  // Decoder lists are indexed by level (finest = 0) to mirror the encoder.
  std::vector<torch::nn::ModuleList> dec_levels(static_cast<std::size_t>(levels));
  std::vector<std::shared_ptr<torch::nn::Module>> dec_attn(static_cast<std::size_t>(levels));
  std::vector<std::shared_ptr<torch::nn::Module>> ups(static_cast<std::size_t>(levels));
  for (std::int64_t i = levels - 1; i >= 0; --i) {
    const auto ci = ch[static_cast<std::size_t>(i)];
    torch::nn::ModuleList blocks;
    for (std::int64_t b = 0; b < config_.blocks_per_level; ++b) {
      blocks->push_back(ResBlock(cur + ci, ci, emb_dim_));
      cur = ci;
    }
    dec_levels[static_cast<std::size_t>(i)] = blocks;
    if (level_attention_[static_cast<std::size_t>(i)]) {
      dec_attn[static_cast<std::size_t>(i)] = SpatialAttention(cur).ptr();
    } else {
      dec_attn[static_cast<std::size_t>(i)] = torch::nn::Identity().ptr();
    }
    if (i > 0) ups[static_cast<std::size_t>(i)] = conv3(cur, cur).ptr();
    else ups[static_cast<std::size_t>(i)] = torch::nn::Identity().ptr();
  }
  dec_ = register_module("dec", torch::nn::ModuleList());
  dec_attn_ = register_module("dec_attn", torch::nn::ModuleList());
  up_ = register_module("up", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < levels; ++i) {
    dec_->push_back(dec_levels[static_cast<std::size_t>(i)]);
    dec_attn_->push_back(dec_attn[static_cast<std::size_t>(i)]);
    up_->push_back(ups[static_cast<std::size_t>(i)]);
  }

  torch::nn::ModuleList output;
  out_norm_ = torch::nn::GroupNorm(norm_groups(cur), cur);
  out_conv_ = conv3(cur, config_.out_channels);
  output->push_back(out_norm_);
  output->push_back(out_conv_);
  register_module("output", output);
}

EncoderOutput UNet3DImpl::encode(const torch::Tensor& x_t, const torch::Tensor& t) {
  const auto& in = config_.input;
  if (x_t.dim() != 5 || x_t.size(1) != config_.in_channels || x_t.size(2) != in.depth ||
      x_t.size(3) != in.height || x_t.size(4) != in.width) {
    throw ShapeError("denoiser input must be (B, 1, " + std::to_string(in.depth) + ", " +
                     std::to_string(in.height) + ", " + std::to_string(in.width) + ")");
  }
  if (t.dim() != 1 || t.size(0) != x_t.size(0)) throw ShapeError("one timestep per sample expected");
  check_finite(x_t, "denoiser input");

  EncoderOutput out;
  out.embedding = time_mlp_->forward(
      sinusoidal_embedding(t, config_.base_channels).to(x_t.scalar_type()));
  auto h = input_->forward(x_t);
  const auto levels = enc_->size();
  for (std::size_t i = 0; i < levels; ++i) {
    auto blocks = enc_[i]->as<torch::nn::ModuleList>();
    for (const auto& block : *blocks) {
      h = block->as<ResBlockImpl>()->forward(h, out.embedding);
      out.skips.push_back(h);
    }
    if (level_attention_[i]) {
      h = enc_attn_[i]->as<SpatialAttentionImpl>()->forward(h);
      out.skips.back() = h;
    }
    if (i + 1 < levels) h = down_[i]->as<torch::nn::Conv3dImpl>()->forward(h);
  }
  out.mid[0] = mid0_->forward(h, out.embedding);
  out.mid[1] = mid1_->forward(out.mid[0]);
  out.mid[2] = mid2_->forward(out.mid[1], out.embedding);
  return out;
}

torch::Tensor UNet3DImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t) {
  if (zero_output_) {
    encode(x_t, t);  // keeps shape and finiteness checks identical
    return torch::zeros_like(x_t);
  }
  auto enc = encode(x_t, t);
  auto h = enc.mid[2];
  const auto levels = dec_->size();
  for (std::size_t step = 0; step < levels; ++step) {
    const std::size_t i = levels - 1 - step;
    auto blocks = dec_[i]->as<torch::nn::ModuleList>();
    for (const auto& block : *blocks) {
      auto skip = enc.skips.back();
      enc.skips.pop_back();
      h = block->as<ResBlockImpl>()->forward(torch::cat({h, skip}, 1), enc.embedding);
    }
    if (level_attention_[i]) h = dec_attn_[i]->as<SpatialAttentionImpl>()->forward(h);
    if (i > 0) {
      h = F::interpolate(h, F::InterpolateFuncOptions()
                                .scale_factor(std::vector<double>{2.0, 2.0, 2.0})
                                .mode(torch::kNearest));
      h = up_[i]->as<torch::nn::Conv3dImpl>()->forward(h);
    }
  }
  return out_conv_->forward(torch::silu(out_norm_->forward(h)));
}

bool UNet3DImpl::is_decoder_parameter(const std::string& name) {
  for (const char* prefix : {"dec.", "dec_attn.", "up.", "output."}) {
    if (name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

std::vector<torch::Tensor> UNet3DImpl::encoder_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& p : named_parameters()) {
    if (!is_decoder_parameter(p.key())) out.push_back(p.value());
  }
  return out;
}

std::vector<torch::Tensor> UNet3DImpl::decoder_parameters() {
  std::vector<torch::Tensor> out;
  for (auto& p : named_parameters()) {
    if (is_decoder_parameter(p.key())) out.push_back(p.value());
  }
  return out;
}

UNet3D make_denoiser(const DenoiserConfig& config, std::uint64_t seed) {
  torch::manual_seed(seed);
  return UNet3D(config);
}

void check_finite(const torch::Tensor& t, const std::string& what) {
  if (!torch::isfinite(t).all().item<bool>()) throw NumericError(what + " contains NaN or Inf");
}

}  // namespace orthodiff
