#include "orthodiff/fusion.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "orthodiff/errors.hpp"

namespace orthodiff {

namespace {

void check_same_width(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& c) {
  if (a.sizes() != b.sizes() || a.sizes() != c.sizes()) {
    throw ShapeError("orientation embeddings must have identical shapes");
  }
  if (a.dim() < 1 || a.dim() > 2) throw ShapeError("embeddings must be (C') or (B, C')");
}

torch::Tensor linear_init(std::initializer_list<std::int64_t> shape, std::int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return torch::empty(shape).uniform_(-bound, bound);
}

}  // namespace

std::string_view to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::kSimpleConcat: return "simple_concat";
    case FusionStrategy::kLinearAdd: return "linear_add";
    case FusionStrategy::kLinearConcat: return "linear_concat";
    case FusionStrategy::kCrossAttention: return "cross_attention";
    case FusionStrategy::kMpae: return "mpae";
  }
  return "simple_concat";
}

FusionStrategy fusion_strategy_from_string(std::string_view name) {
  for (auto s : {FusionStrategy::kSimpleConcat, FusionStrategy::kLinearAdd, FusionStrategy::kLinearConcat,
                 FusionStrategy::kCrossAttention, FusionStrategy::kMpae}) {
    if (name == to_string(s)) return s;
  }
  throw ValidationError("unknown fusion strategy '" + std::string(name) + "'");
}

bool is_feature_level(FusionStrategy s) { return s != FusionStrategy::kMpae; }

std::int64_t fused_dim(FusionStrategy s, std::int64_t c_in, std::int64_t embed_dim) {
  switch (s) {
    case FusionStrategy::kSimpleConcat: return 3 * c_in;
    case FusionStrategy::kLinearAdd: return embed_dim;
    case FusionStrategy::kLinearConcat:
    case FusionStrategy::kCrossAttention: return 3 * embed_dim;
    case FusionStrategy::kMpae: break;
  }
  throw ConfigError("MPAE fuses logits, not features");
}

FusedFeature simple_concat(const torch::Tensor& e_sag, const torch::Tensor& e_cor, const torch::Tensor& e_ax) {
  check_same_width(e_sag, e_cor, e_ax);
  return FusedFeature{torch::cat({e_sag, e_cor, e_ax}, -1), FusionStrategy::kSimpleConcat};
}

FusedFeature linear_fuse(const torch::Tensor& e_sag, const torch::Tensor& e_cor, const torch::Tensor& e_ax,
                         const std::array<torch::Tensor, 3>& weights, LinearMode mode) {
  check_same_width(e_sag, e_cor, e_ax);
  const auto c = e_sag.size(-1);
  const auto e = weights[0].size(0);
  for (const auto& w : weights) {
    if (w.dim() != 2 || w.size(1) != c || w.size(0) != e) throw ShapeError("projections must all be (E, C')");
  }
  std::array<torch::Tensor, 3> h = {torch::matmul(e_sag, weights[0].t()), torch::matmul(e_cor, weights[1].t()),
                                    torch::matmul(e_ax, weights[2].t())};
  if (mode == LinearMode::kAdd) return FusedFeature{h[0] + h[1] + h[2], FusionStrategy::kLinearAdd};
  return FusedFeature{torch::cat({h[0], h[1], h[2]}, -1), FusionStrategy::kLinearConcat};
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(std::int64_t embed_dim, std::int64_t heads)
    : embed_dim_(embed_dim), heads_(heads) {
  if (heads <= 0 || embed_dim % heads != 0) {
    throw ConfigError("embedding width " + std::to_string(embed_dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  q_proj = register_module("q_proj", torch::nn::Linear(embed_dim, embed_dim));
  k_proj = register_module("k_proj", torch::nn::Linear(embed_dim, embed_dim));
  v_proj = register_module("v_proj", torch::nn::Linear(embed_dim, embed_dim));
  out_proj = register_module("out_proj", torch::nn::Linear(embed_dim, embed_dim));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key,
                                              const torch::Tensor& value, torch::Tensor* weights) {
  if (query.dim() != 3 || key.dim() != 3 || value.dim() != 3) throw ShapeError("attention inputs must be (B, L, E)");
  const auto b = query.size(0);
  const auto dk = embed_dim_ / heads_;
  auto split = [&](const torch::Tensor& t) { return t.reshape({b, t.size(1), heads_, dk}).transpose(1, 2); };
  auto q = split(q_proj->forward(query));
  auto k = split(k_proj->forward(key));
  auto v = split(v_proj->forward(value));
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dk)), -1);
  if (weights != nullptr) *weights = attn;
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({b, query.size(1), embed_dim_});
  return out_proj->forward(out);
}

FusionModuleImpl::FusionModuleImpl(FusionStrategy strategy, std::int64_t in_dim, std::int64_t embed_dim,
                                   std::int64_t heads)
    : strategy_(strategy), in_dim_(in_dim), embed_dim_(embed_dim) {
  if (strategy == FusionStrategy::kMpae) throw ConfigError("MPAE is not a feature-level fusion module");
  if (in_dim <= 0) throw ConfigError("fusion input width must be positive");
  if (strategy == FusionStrategy::kSimpleConcat) return;
  if (embed_dim <= 0) throw ConfigError("fusion embedding width must be positive");
  if (strategy == FusionStrategy::kCrossAttention && embed_dim % heads != 0) {
    throw ConfigError("embedding width " + std::to_string(embed_dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  for (auto o : kOrientations) {
    const auto i = index_of(o);
    const std::string suffix(to_string(o));
    projections[i] = register_module("proj_" + suffix, torch::nn::Linear(in_dim, embed_dim));
    if (strategy == FusionStrategy::kCrossAttention) {
      attention[i] = register_module("xattn_" + suffix, MultiHeadAttention(embed_dim, heads));
      norms[i] = register_module("norm_" + suffix,
                                 torch::nn::LayerNorm(torch::nn::LayerNormOptions({embed_dim})));
    }
  }
}

std::int64_t FusionModuleImpl::out_dim() const { return fused_dim(strategy_, in_dim_, embed_dim_); }

torch::Tensor FusionModuleImpl::forward(const torch::Tensor& e_sag, const torch::Tensor& e_cor,
                                        const torch::Tensor& e_ax) {
  check_same_width(e_sag, e_cor, e_ax);
  if (e_sag.size(-1) != in_dim_) throw ShapeError("fusion input width mismatch");
  if (strategy_ == FusionStrategy::kSimpleConcat) return torch::cat({e_sag, e_cor, e_ax}, -1);

  const std::array<const torch::Tensor*, 3> in = {&e_sag, &e_cor, &e_ax};
  std::array<torch::Tensor, 3> h;
  for (std::size_t i = 0; i < 3; ++i) h[i] = projections[i]->forward(*in[i]);
  if (strategy_ == FusionStrategy::kLinearAdd) return h[0] + h[1] + h[2];
  if (strategy_ == FusionStrategy::kLinearConcat) return torch::cat({h[0], h[1], h[2]}, -1);

  const bool single = e_sag.dim() == 1;
  std::array<torch::Tensor, 3> out;
  for (auto o : kOrientations) {
    const auto i = index_of(o);
    const auto j = index_of(cross_attention_partner(o));
    auto q = (single ? h[i].unsqueeze(0) : h[i]).unsqueeze(1);
    auto kv = (single ? h[j].unsqueeze(0) : h[j]).unsqueeze(1);
    auto attended = attention[i]->forward(q, kv, kv).squeeze(1);
    auto res = norms[i]->forward((single ? h[i].unsqueeze(0) : h[i]) + attended);
    out[i] = single ? res.squeeze(0) : res;
  }
  return torch::cat({out[0], out[1], out[2]}, -1);
}

FusedFeature cross_attention_fuse(const torch::Tensor& e_sag, const torch::Tensor& e_cor, const torch::Tensor& e_ax,
                                  FusionModule& module) {
  if (module->strategy() != FusionStrategy::kCrossAttention) throw ConfigError("module is not cross-attention");
  return FusedFeature{module->forward(e_sag, e_cor, e_ax), FusionStrategy::kCrossAttention};
}

MpaeGateImpl::MpaeGateImpl(std::int64_t n_labels, std::int64_t hidden, double dropout)
    : n_labels_(n_labels), hidden_(hidden), dropout_(dropout) {
  if (n_labels <= 0 || hidden <= 0) throw ConfigError("gate needs positive label and hidden counts");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("gate dropout must lie in [0, 1)");
  w1 = register_parameter("w1", linear_init({n_labels, hidden, 3}, 3));
  b1 = register_parameter("b1", linear_init({n_labels, hidden}, 3));
  w2 = register_parameter("w2", linear_init({n_labels, 3, hidden}, hidden));
  b2 = register_parameter("b2", linear_init({n_labels, 3}, hidden));
}

torch::Tensor MpaeGateImpl::scores(const torch::Tensor& z) {
  if (z.dim() != 3 || z.size(1) != 3 || z.size(2) != n_labels_) throw ShapeError("gate input must be (B, 3, K)");
  auto per_label = z.permute({0, 2, 1});  // (B, K, 3)
  auto h = torch::relu(torch::einsum("bki,khi->bkh", {per_label, w1}) + b1);
  h = torch::dropout(h, dropout_, is_training());
  auto s = torch::einsum("bkh,kih->bki", {h, w2}) + b2;
  return s.permute({0, 2, 1});
}

GateWeights mpae_gate(const ExpertLogits& z, MpaeGate& gate) {
  const bool single = z.z.dim() == 2;
  auto batch = single ? z.z.unsqueeze(0) : z.z;
  auto alpha = torch::softmax(gate->scores(batch), 1);
  return GateWeights{single ? alpha.squeeze(0) : alpha};
}

torch::Tensor mpae_fuse(const ExpertLogits& z, const GateWeights& alpha) {
  if (z.z.sizes() != alpha.alpha.sizes()) throw ShapeError("gate weights must match expert logit shape");
  if (z.z.dim() < 2 || z.z.size(-2) != 3) throw ShapeError("expert logits must have 3 orientation rows");
  {
    torch::NoGradGuard no_grad;
    auto a = alpha.alpha.detach();
    const bool nonneg = (a >= -1e-12).all().item<bool>();
    const double dev = (a.sum(-2) - 1.0).abs().max().item<double>();
    if (!nonneg || !(dev <= 1e-6)) throw ValidationError("gate weights are not on the probability simplex");
  }
  return (alpha.alpha * z.z).sum(-2);
}

std::string gate_weights_csv(const std::vector<std::string>& patient_ids, const torch::Tensor& alpha,
                             const std::vector<std::string>& label_names) {
  if (alpha.dim() != 3 || alpha.size(1) != 3 || alpha.size(0) != static_cast<std::int64_t>(patient_ids.size())) {
    throw ShapeError("alpha must be (P, 3, K) with one row per patient");
  }
  const auto k = alpha.size(2);
  if (!label_names.empty() && static_cast<std::int64_t>(label_names.size()) != k) {
    throw ShapeError("label name count does not match alpha");
  }
  auto a = alpha.to(torch::kFloat64).contiguous();
  auto acc = a.accessor<double, 3>();
  std::ostringstream out;
  out << "patient_id,label,alpha_sag,alpha_cor,alpha_ax\n" << std::setprecision(17);
  for (std::size_t p = 0; p < patient_ids.size(); ++p) {
    for (std::int64_t j = 0; j < k; ++j) {
      out << patient_ids[p] << ','
          << (label_names.empty() ? "label_" + std::to_string(j) : label_names[static_cast<std::size_t>(j)]);
      for (std::int64_t o = 0; o < 3; ++o) out << ',' << acc[static_cast<std::int64_t>(p)][o][j];
      out << '\n';
    }
  }
  return out.str();
}

}  // namespace orthodiff
