#include "orthodiff/pooling.hpp"

#include <cmath>

#include "orthodiff/errors.hpp"

namespace orthodiff {

namespace {

// (C, D', H', W') or (B, C, D', H', W') -> (B, N, C)
torch::Tensor tokens_of(const torch::Tensor& fm) {
  if (fm.dim() < 2) throw ShapeError("feature map needs a channel axis");
  if (fm.numel() == 0) throw ShapeError("feature map is empty");
  return fm.flatten(2).transpose(1, 2);
}

torch::Tensor batched(const FeatureMap& fm) {
  if (fm.data.dim() < 1) throw ShapeError("feature map needs a channel axis");
  auto d = fm.data.dim() == 1 ? fm.data.unsqueeze(1) : fm.data;
  return d.unsqueeze(0);
}

PooledEmbedding wrap(torch::Tensor v, PoolingMethod m, const FeatureMap& fm) {
  return PooledEmbedding{v.squeeze(0), m, fm.tap, fm.orientation, fm.scan_id};
}

}  // namespace

std::string_view to_string(PoolingMethod m) {
  switch (m) {
    case PoolingMethod::kGap: return "gap";
    case PoolingMethod::kGlp: return "glp";
    case PoolingMethod::kSap: return "sap";
  }
  return "sap";
}

PoolingMethod pooling_method_from_string(std::string_view name) {
  if (name == "gap" || name == "GAP") return PoolingMethod::kGap;
  if (name == "glp" || name == "GLP") return PoolingMethod::kGlp;
  if (name == "sap" || name == "SAP") return PoolingMethod::kSap;
  throw ValidationError("unknown pooling method '" + std::string(name) + "'");
}

std::int64_t pooled_dim(PoolingMethod m, std::int64_t channels) {
  return m == PoolingMethod::kGap ? channels : 2 * channels;
}

std::int64_t default_sap_heads(std::int64_t channels) { return std::max<std::int64_t>(1, channels / 16); }

torch::Tensor gap_batch(const torch::Tensor& fm) {
  if (fm.dim() < 3) throw ShapeError("batched feature map must be (B, C, ...)");
  return tokens_of(fm).mean(1);
}

torch::Tensor glp_batch(const torch::Tensor& fm, const GlpParams& p, torch::Tensor* weights) {
  if (fm.dim() < 3) throw ShapeError("batched feature map must be (B, C, ...)");
  auto x = tokens_of(fm);
  const auto c = x.size(2);
  if (p.w1.dim() != 2 || p.w1.size(1) != c || p.w2.dim() != 2 || p.w2.size(0) != 1 ||
      p.w2.size(1) != p.w1.size(0)) {
    throw ShapeError("GLP scoring MLP does not match channel count");
  }
  auto hidden = torch::relu(torch::matmul(x, p.w1.t()) + p.b1);
  auto scores = (torch::matmul(hidden, p.w2.t()) + p.b2).squeeze(-1);  // (B, N)
  auto alpha = torch::softmax(scores, 1);
  if (weights != nullptr) *weights = alpha;
  auto local = torch::bmm(alpha.unsqueeze(1), x).squeeze(1);
  return torch::cat({x.mean(1), local}, 1);
}

torch::Tensor sap_batch(const torch::Tensor& fm, const SapParams& p, std::int64_t heads,
                        torch::Tensor* attention) {
  if (fm.dim() < 3) throw ShapeError("batched feature map must be (B, C, ...)");
  auto x = tokens_of(fm);
  const auto b = x.size(0);
  const auto n = x.size(1);
  const auto c = x.size(2);
  if (heads <= 0 || c % heads != 0) {
    throw ConfigError("channel count " + std::to_string(c) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  for (const auto* w : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
    if (w->dim() != 2 || w->size(0) != c || w->size(1) != c) throw ShapeError("SAP projections must be (C, C)");
  }
  const auto dk = c / heads;
  auto split = [&](const torch::Tensor& t) { return t.reshape({b, n, heads, dk}).transpose(1, 2); };
  auto q = split(torch::matmul(x, p.w_q));
  auto k = split(torch::matmul(x, p.w_k));
  auto v = split(torch::matmul(x, p.w_v));
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dk)), -1);
  if (attention != nullptr) *attention = attn;
  auto merged = torch::matmul(attn, v).transpose(1, 2).reshape({b, n, c});
  auto out = torch::matmul(merged, p.w_o);
  return torch::cat({x.mean(1), out.mean(1)}, 1);
}

PooledEmbedding gap(const FeatureMap& fm) { return wrap(gap_batch(batched(fm)), PoolingMethod::kGap, fm); }

PooledEmbedding glp(const FeatureMap& fm, const GlpParams& params) {
  return wrap(glp_batch(batched(fm), params), PoolingMethod::kGlp, fm);
}

PooledEmbedding sap(const FeatureMap& fm, const SapParams& params, std::int64_t heads) {
  return wrap(sap_batch(batched(fm), params, heads), PoolingMethod::kSap, fm);
}

PoolingModuleImpl::PoolingModuleImpl(PoolingMethod method, std::int64_t channels, std::int64_t heads)
    : method_(method), channels_(channels), heads_(heads > 0 ? heads : default_sap_heads(channels)) {
  if (channels <= 0) throw ConfigError("pooling needs a positive channel count");
  mean_ = register_buffer("mean", torch::zeros({channels}));
  inv_std_ = register_buffer("inv_std", torch::ones({channels}));
  if (method_ == PoolingMethod::kGlp) {
    const auto hidden = std::max<std::int64_t>(1, channels / 8);
    glp_hidden_ = register_module("glp_hidden", torch::nn::Linear(channels, hidden));
    glp_score_ = register_module("glp_score", torch::nn::Linear(hidden, 1));
  } else if (method_ == PoolingMethod::kSap) {
    if (channels % heads_ != 0) throw ConfigError("SAP channel count not divisible by head count");
    auto make = [&](const char* name, bool xavier) {
      auto w = torch::empty({channels, channels});
      if (xavier) {
        torch::nn::init::xavier_uniform_(w);
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
        torch::nn::init::uniform_(w, -bound, bound);
      }
      return register_parameter(name, w);
    };
    w_q_ = make("w_q", true);
    w_k_ = make("w_k", true);
    w_v_ = make("w_v", true);
    w_o_ = make("w_o", false);
  }
}

torch::Tensor PoolingModuleImpl::forward(const torch::Tensor& fm) {
  if (fm.dim() != 5 || fm.size(1) != channels_) {
    throw ShapeError("pooling expects (B, " + std::to_string(channels_) + ", D', H', W')");
  }
  auto view = std::vector<std::int64_t>{1, channels_, 1, 1, 1};
  auto x = (fm - mean_.view(view)) * inv_std_.view(view);
  switch (method_) {
    case PoolingMethod::kGap: return gap_batch(x);
    case PoolingMethod::kGlp: return glp_batch(x, glp_params());
    case PoolingMethod::kSap: return sap_batch(x, sap_params(), heads_);
  }
  return gap_batch(x);
}

void PoolingModuleImpl::fit_standardization(const torch::Tensor& reference) {
  if (reference.dim() != 5 || reference.size(1) != channels_) throw ShapeError("reference must be (B, C, ...)");
  torch::NoGradGuard no_grad;
  auto tokens = reference.transpose(0, 1).reshape({channels_, -1});
  auto mean = tokens.mean(1);
  auto sd = tokens.std(1, /*unbiased=*/false);
  set_standardization(mean, sd);
}

void PoolingModuleImpl::set_standardization(const torch::Tensor& mean, const torch::Tensor& stddev) {
  if (mean.numel() != channels_ || stddev.numel() != channels_) throw ShapeError("statistics must have C entries");
  torch::NoGradGuard no_grad;
  mean_.copy_(mean.reshape({channels_}));
  inv_std_.copy_(1.0 / (stddev.reshape({channels_}) + 1e-6));
}

GlpParams PoolingModuleImpl::glp_params() const {
  if (method_ != PoolingMethod::kGlp) throw ConfigError("pooling module is not GLP");
  return GlpParams{glp_hidden_->weight, glp_hidden_->bias, glp_score_->weight, glp_score_->bias};
}

SapParams PoolingModuleImpl::sap_params() const {
  if (method_ != PoolingMethod::kSap) throw ConfigError("pooling module is not SAP");
  return SapParams{w_q_, w_k_, w_v_, w_o_};
}

}  // namespace orthodiff
