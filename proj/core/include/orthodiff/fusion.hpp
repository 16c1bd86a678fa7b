#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "orthodiff/pooling.hpp"

namespace orthodiff {

enum class FusionStrategy : std::uint8_t {
  kSimpleConcat = 0,
  kLinearAdd = 1,
  kLinearConcat = 2,
  kCrossAttention = 3,
  kMpae = 4,
};

std::string_view to_string(FusionStrategy s);
FusionStrategy fusion_strategy_from_string(std::string_view name);
bool is_feature_level(FusionStrategy s);

struct FusedFeature {
  torch::Tensor vector;
  FusionStrategy strategy = FusionStrategy::kSimpleConcat;
  std::int64_t dim() const { return vector.size(-1); }
};

// Output width of a feature-level strategy for per-orientation width c_in.
std::int64_t fused_dim(FusionStrategy s, std::int64_t c_in, std::int64_t embed_dim);

// [sag || cor || ax]; inputs may be (C') or batched (B, C').
FusedFeature simple_concat(const torch::Tensor& e_sag, const torch::Tensor& e_cor,
                           const torch::Tensor& e_ax);

enum class LinearMode : std::uint8_t { kAdd, kConcat };

// H(o) = W(o) e(o) with W(o) of shape (E, C'); add or concatenate.
FusedFeature linear_fuse(const torch::Tensor& e_sag, const torch::Tensor& e_cor,
                         const torch::Tensor& e_ax, const std::array<torch::Tensor, 3>& weights,
                         LinearMode mode);

// Multi-head attention over short token sequences, (B, L, E) layout, with biases.
class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(std::int64_t embed_dim, std::int64_t heads);
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key,
                        const torch::Tensor& value, torch::Tensor* weights = nullptr);

  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};

 private:
  std::int64_t embed_dim_;
  std::int64_t heads_;
};
TORCH_MODULE(MultiHeadAttention);

// Partner used as key/value for each orientation: sag->cor, cor->ax, ax->sag.
constexpr Orientation cross_attention_partner(Orientation o) {
  switch (o) {
    case Orientation::kSagittal: return Orientation::kCoronal;
    case Orientation::kCoronal: return Orientation::kAxial;
    case Orientation::kAxial: return Orientation::kSagittal;
  }
  return Orientation::kSagittal;
}

inline constexpr std::int64_t kCrossAttentionHeads = 4;

// Feature-level fusion with trainable parameters. simple_concat has none.
class FusionModuleImpl : public torch::nn::Module {
 public:
  FusionModuleImpl(FusionStrategy strategy, std::int64_t in_dim, std::int64_t embed_dim,
                   std::int64_t heads = kCrossAttentionHeads);

  // Three (B, C') embeddings in orientation order -> (B, out_dim()).
  torch::Tensor forward(const torch::Tensor& e_sag, const torch::Tensor& e_cor,
                        const torch::Tensor& e_ax);
  std::int64_t out_dim() const;
  FusionStrategy strategy() const { return strategy_; }

  std::array<torch::nn::Linear, 3> projections{nullptr, nullptr, nullptr};
  std::array<MultiHeadAttention, 3> attention{nullptr, nullptr, nullptr};
  std::array<torch::nn::LayerNorm, 3> norms{nullptr, nullptr, nullptr};

 private:
  FusionStrategy strategy_;
  std::int64_t in_dim_;
  std::int64_t embed_dim_;
};
TORCH_MODULE(FusionModule);

FusedFeature cross_attention_fuse(const torch::Tensor& e_sag, const torch::Tensor& e_cor,
                                  const torch::Tensor& e_ax, FusionModule& module);

// Per-orientation expert logits, rows (sag, cor, ax) by K columns.
struct ExpertLogits {
  torch::Tensor z;  // (3, K) or batched (B, 3, K)
  std::string patient_id;
};

// Softmax fusion weights, same layout as ExpertLogits; columns sum to one.
struct GateWeights {
  torch::Tensor alpha;
};

// One gating MLP per label: R^3 -> 16 -> R^3 with ReLU and train-only dropout.
class MpaeGateImpl : public torch::nn::Module {
 public:
  MpaeGateImpl(std::int64_t n_labels, std::int64_t hidden = 16, double dropout = 0.1);
  // (B, 3, K) logits -> (B, 3, K) unnormalised scores.
  torch::Tensor scores(const torch::Tensor& z);
  std::int64_t n_labels() const { return n_labels_; }

  torch::Tensor w1, b1, w2, b2;  // (K, H, 3), (K, H), (K, 3, H), (K, 3)

 private:
  std::int64_t n_labels_;
  std::int64_t hidden_;
  double dropout_;
};
TORCH_MODULE(MpaeGate);

GateWeights mpae_gate(const ExpertLogits& z, MpaeGate& gate);
// Per-label convex combination; throws ValidationError if alpha is off the simplex.
torch::Tensor mpae_fuse(const ExpertLogits& z, const GateWeights& alpha);

// CSV `patient_id,label,alpha_sag,alpha_cor,alpha_ax`.
std::string gate_weights_csv(const std::vector<std::string>& patient_ids,
                             const torch::Tensor& alpha,
                             const std::vector<std::string>& label_names);

}  // namespace orthodiff
