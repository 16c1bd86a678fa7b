#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "orthodiff/feature_tap.hpp"

namespace orthodiff {

enum class PoolingMethod : std::uint8_t { kGap = 0, kGlp = 1, kSap = 2 };

std::string_view to_string(PoolingMethod m);
PoolingMethod pooling_method_from_string(std::string_view name);

struct PooledEmbedding {
  torch::Tensor vector;  // (C) for GAP, (2C) for GLP and SAP
  PoolingMethod method = PoolingMethod::kSap;
  TapPoint tap;
  Orientation orientation = Orientation::kSagittal;
  std::string scan_id;
};

// Scoring MLP of global-local pooling: C -> hidden -> 1 with ReLU.
struct GlpParams {
  torch::Tensor w1;  // (hidden, C)
  torch::Tensor b1;  // (hidden)
  torch::Tensor w2;  // (1, hidden)
  torch::Tensor b2;  // (1)
};

// Projection matrices applied on the right of the token matrix X (N x C).
struct SapParams {
  torch::Tensor w_q, w_k, w_v, w_o;  // (C, C)
};

PooledEmbedding gap(const FeatureMap& fm);
PooledEmbedding glp(const FeatureMap& fm, const GlpParams& params);
PooledEmbedding sap(const FeatureMap& fm, const SapParams& params, std::int64_t heads);

// Batched operators over (B, C, D', H', W') feature maps.
torch::Tensor gap_batch(const torch::Tensor& fm);
// Returns (B, 2C); when `weights` is given it receives the (B, N) softmax weights.
torch::Tensor glp_batch(const torch::Tensor& fm, const GlpParams& params,
                        torch::Tensor* weights = nullptr);
// Returns (B, 2C); when `attention` is given it receives (B, h, N, N).
torch::Tensor sap_batch(const torch::Tensor& fm, const SapParams& params, std::int64_t heads,
                        torch::Tensor* attention = nullptr);

std::int64_t pooled_dim(PoolingMethod m, std::int64_t channels);
// Heads for SAP keep a per-head width of 16 where possible (h = C / 16, at least 1).
std::int64_t default_sap_heads(std::int64_t channels);

// Trainable pooling operator. Tokens are standardised with fixed per-channel
// statistics (identity until set_standardization) before pooling.
class PoolingModuleImpl : public torch::nn::Module {
 public:
  PoolingModuleImpl(PoolingMethod method, std::int64_t channels, std::int64_t heads = 0);

  torch::Tensor forward(const torch::Tensor& fm);
  std::int64_t out_dim() const { return pooled_dim(method_, channels_); }
  PoolingMethod method() const { return method_; }
  std::int64_t heads() const { return heads_; }

  // Per-channel mean/std over all tokens of a (B, C, D', H', W') reference batch.
  void fit_standardization(const torch::Tensor& reference);
  void set_standardization(const torch::Tensor& mean, const torch::Tensor& stddev);

  GlpParams glp_params() const;
  SapParams sap_params() const;

 private:
  PoolingMethod method_;
  std::int64_t channels_;
  std::int64_t heads_;
  torch::Tensor mean_, inv_std_;
  torch::nn::Linear glp_hidden_{nullptr}, glp_score_{nullptr};
  torch::Tensor w_q_, w_k_, w_v_, w_o_;
};
TORCH_MODULE(PoolingModule);

}  // namespace orthodiff
