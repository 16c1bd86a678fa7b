#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "orthodiff/ehr_record.hpp"

namespace orthodiff {

inline constexpr std::int64_t kEhrFeatureDim = 17;
inline constexpr std::int64_t kEventEmbeddingDim = 8;
inline constexpr std::int64_t kEhrHiddenUnits = 64;

// Training-split mean and standard deviation of age, height and weight.
struct EhrStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> stddev{1, 1, 1};

  static EhrStats fit(const std::vector<EHRRecord>& training_records);
};

// Fixed part of the encoding: 3 z-scores, sex one-hot (male, female, UNK),
// patient-type one-hot (athlete, non_athlete, UNK). The event index selects the
// learned embedding row (8 = UNK).
struct EhrFixedFeatures {
  std::array<float, 9> dense{};
  std::int64_t event_index = kNumInjuryEvents;
};

EhrFixedFeatures encode_ehr_fixed(const EHRRecord& rec, const EhrStats& stats);

// Event lookup table followed by the FC(64) -> ReLU -> LayerNorm -> Dropout(0.2)
// -> Linear(K) head.
class EhrModelImpl : public torch::nn::Module {
 public:
  explicit EhrModelImpl(std::int64_t n_labels, double dropout = 0.2);

  // (B, 9) dense block and (B) event indices -> (B, 17) features.
  torch::Tensor encode(const torch::Tensor& dense, const torch::Tensor& events);
  torch::Tensor head(const torch::Tensor& features);
  torch::Tensor forward(const torch::Tensor& dense, const torch::Tensor& events) {
    return head(encode(dense, events));
  }

  torch::nn::Embedding event_table{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Dropout dropout{nullptr};
  std::int64_t n_labels() const { return n_labels_; }

 private:
  std::int64_t n_labels_;
};
TORCH_MODULE(EhrModel);

// Full 17-wide feature of one record.
torch::Tensor encode_ehr(const EHRRecord& rec, const EhrStats& stats, EhrModel& model);
torch::Tensor ehr_head(const torch::Tensor& feature, EhrModel& model);

// Per-label gamma = sigmoid(w) and fused = gamma * z_mri + (1 - gamma) * z_ehr.
class LateFusionImpl : public torch::nn::Module {
 public:
  explicit LateFusionImpl(std::int64_t n_labels);
  torch::Tensor gamma() const { return torch::sigmoid(w); }
  torch::Tensor forward(const torch::Tensor& z_mri, const torch::Tensor& z_ehr);

  torch::Tensor w;
};
TORCH_MODULE(LateFusion);

torch::Tensor late_fuse(const torch::Tensor& z_mri, const torch::Tensor& z_ehr,
                        const torch::Tensor& w);

// CSV with header `patient_id,age,height,weight,sex,patient_type,event`;
// empty cells are missing values.
std::map<std::string, EHRRecord> read_ehr_csv(const std::string& text);
std::string write_ehr_csv(const std::map<std::string, EHRRecord>& records);

}  // namespace orthodiff
