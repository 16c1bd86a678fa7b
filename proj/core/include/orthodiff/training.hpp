#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "orthodiff/denoiser.hpp"
#include "orthodiff/ehr.hpp"
#include "orthodiff/feature_tap.hpp"
#include "orthodiff/fusion.hpp"
#include "orthodiff/metrics.hpp"
#include "orthodiff/pooling.hpp"
#include "orthodiff/schedule.hpp"
#include "orthodiff/synth.hpp"

namespace orthodiff {

enum class ProbeSetting : std::uint8_t { kLinearProbe = 0, kFineTune = 1 };
std::string_view to_string(ProbeSetting s);
ProbeSetting probe_setting_from_string(std::string_view name);

enum class TrainStage : std::uint8_t { kStage1LP, kStage1FT, kStage2Fusion, kSegFT };

struct TrainPlan {
  TrainStage stage = TrainStage::kStage1LP;
  std::int64_t epochs = 10;
  // Pooling, fusion and head learning rate.
  double lr = 5e-4;
  // Encoder/bottleneck learning rate under fine-tuning.
  double backbone_lr = 5e-4 * 0.05;
  std::int64_t batch_size = 8;
  // Lower bound on optimiser steps; small label fractions otherwise see few updates.
  std::int64_t min_steps = 0;
  std::uint64_t seed = 0;
  double label_fraction = 1.0;
  double weight_decay = 0.0;
  PoolingMethod pooling = PoolingMethod::kSap;
  std::uint64_t noise_seed = 0;

  void validate() const;
  // epochs * ceil(n / batch_size), raised to min_steps.
  std::int64_t total_steps(std::int64_t n_examples) const;
};

// Copies every parameter and buffer into a freshly built denoiser.
UNet3D clone_denoiser(UNet3D& source);

// Nested patient subset: a seeded permutation of the training ids truncated to
// ceil(fraction * n); smaller fractions are prefixes of larger ones.
std::vector<std::string> nested_subset(const std::vector<std::string>& train_ids,
                                       double fraction, std::uint64_t seed);

// ---------------------------------------------------------------- stage 1

struct Stage1Artifacts {
  Orientation orientation = Orientation::kSagittal;
  TapPoint tap;
  ProbeSetting setting = ProbeSetting::kLinearProbe;
  UNet3D backbone{nullptr};
  PoolingModule pooling{nullptr};
  torch::nn::Linear head{nullptr};
  std::string backbone_checksum_before;
  std::string backbone_checksum_after;
  std::vector<double> epoch_losses;
};

// Per-scan training examples of one orientation.
struct ScanBatch {
  std::vector<std::string> patient_ids;
  std::vector<std::string> scan_ids;
  torch::Tensor volumes;  // (N, 1, D, H, W)
  torch::Tensor noise;    // (N, 1, D, H, W) deterministic tap noise
  torch::Tensor labels;   // (N, K) float
};

ScanBatch collect_scans(const std::vector<const StudyRecord*>& records, Orientation o,
                        std::uint64_t noise_seed);

// Bottleneck features of a scan batch with gradients disabled.
torch::Tensor frozen_features(UNet3D& backbone, const ScanBatch& scans, const TapPoint& tap,
                              const NoiseSchedule& sched, std::int64_t chunk = 32);

// Trains pooling + single-layer linear head on one orientation. LP keeps the
// backbone frozen; FT also updates encoder, bottleneck and timestep MLP.
Stage1Artifacts train_stage1(const DatasetIndex& dataset, Orientation o, const TapPoint& tap,
                             ProbeSetting setting, const TrainPlan& plan, UNet3D& pretrained,
                             const NoiseSchedule& sched,
                             const std::vector<std::string>* patient_subset = nullptr);

// Pooled embeddings (N, C') of scans through frozen stage-1 components.
torch::Tensor stage1_embeddings(Stage1Artifacts& a, const ScanBatch& scans,
                                const NoiseSchedule& sched);
torch::Tensor stage1_logits(Stage1Artifacts& a, const ScanBatch& scans,
                            const NoiseSchedule& sched);

// Per-patient probabilities for one orientation: mean of per-scan sigmoid outputs.
metrics::MultiLabelScores predict_stage1(Stage1Artifacts& a,
                                         const std::vector<const StudyRecord*>& records,
                                         const NoiseSchedule& sched, std::uint64_t noise_seed);

// ---------------------------------------------------------------- stage 2

// Sum of w_i * mean_k BCE(logit_ik, y_ik). Throws ValidationError when the
// weights of any patient present in `patient_of` do not sum to one (1e-9).
torch::Tensor weighted_bce(const torch::Tensor& logits, const torch::Tensor& targets,
                           const torch::Tensor& weights,
                           const std::vector<std::string>* patient_of = nullptr);

// Enumerated cross-orientation tuples over a record set with their weights.
struct TupleSet {
  std::vector<std::string> patient_ids;  // owning patient per tuple
  std::array<std::vector<std::int64_t>, 3> scan_rows;  // row per orientation
  torch::Tensor weights;                 // (M)
  torch::Tensor labels;                  // (M, K)
  std::vector<std::string> excluded;     // patients missing an orientation
};

struct Stage2Artifacts {
  FusionStrategy strategy = FusionStrategy::kSimpleConcat;
  FusionModule fusion{nullptr};
  torch::nn::Linear head{nullptr};
  MpaeGate gate{nullptr};
  std::array<std::string, 3> stage1_checksums_before;
  std::array<std::string, 3> stage1_checksums_after;
  std::vector<double> epoch_losses;
  std::vector<std::string> excluded_patients;
};

struct EmbeddingTable {
  std::map<std::string, std::int64_t> row_of_scan;
  torch::Tensor embeddings;  // (N, C')
  torch::Tensor logits;      // (N, K) stage-1 head outputs
};

EmbeddingTable embed_orientation(Stage1Artifacts& a,
                                 const std::vector<const StudyRecord*>& records,
                                 const NoiseSchedule& sched, std::uint64_t noise_seed);

TupleSet enumerate_tuples(const std::vector<const StudyRecord*>& records,
                          const std::array<EmbeddingTable, 3>& tables);

// Combined digest over every stage-1 tensor (backbone, pooling, head).
std::string stage1_checksum(Stage1Artifacts& a);

// Expert logits for MPAE gate training via k-fold refits of pooling + head on
// frozen backbone features; returns (N_train_scans, K) per orientation.
std::array<EmbeddingTable, 3> cross_validated_expert_logits(
    std::array<Stage1Artifacts, 3>& stage1, const std::vector<const StudyRecord*>& records,
    const TrainPlan& plan, const NoiseSchedule& sched, int folds = 5);

Stage2Artifacts train_stage2_fusion(const DatasetIndex& dataset,
                                    std::array<Stage1Artifacts, 3>& stage1,
                                    FusionStrategy strategy, const TrainPlan& plan,
                                    const NoiseSchedule& sched,
                                    const std::vector<std::string>* patient_subset = nullptr);

struct FusedPrediction {
  metrics::MultiLabelScores scores;      // per-patient mean of tuple probabilities
  std::vector<std::string> patient_ids;
  torch::Tensor patient_logits;          // (P, K) mean of tuple logits
  torch::Tensor gate_alpha;              // (P, 3, K) mean gate weights (MPAE only)
};

FusedPrediction predict_fused(std::array<Stage1Artifacts, 3>& stage1, Stage2Artifacts& stage2,
                              const std::vector<const StudyRecord*>& records,
                              const NoiseSchedule& sched, std::uint64_t noise_seed);

// ---------------------------------------------------------------- EHR

struct EhrFusionArtifacts {
  EhrStats stats;
  EhrModel model{nullptr};
  LateFusion late{nullptr};
};

// Trains the EHR head and per-label gamma jointly against fixed MRI logits.
EhrFusionArtifacts train_ehr_fusion(const std::vector<const StudyRecord*>& train_records,
                                    const torch::Tensor& train_mri_logits,
                                    const TrainPlan& plan);
torch::Tensor predict_ehr_fusion(EhrFusionArtifacts& a,
                                 const std::vector<const StudyRecord*>& records,
                                 const torch::Tensor& mri_logits);

// ---------------------------------------------------------------- segmentation

// conv3x3x3 -> ReLU -> trilinear upsample to the input grid -> 1x1x1 classifier.
class SegHeadImpl : public torch::nn::Module {
 public:
  SegHeadImpl(std::int64_t in_channels, std::int64_t n_classes, Resolution output);
  torch::Tensor forward(const torch::Tensor& bottleneck);

 private:
  torch::nn::Conv3d conv_{nullptr}, classifier_{nullptr};
  Resolution output_;
};
TORCH_MODULE(SegHead);

// Foreground soft Dice loss with +1 smoothing: 1 - mean_c (2I + 1) / (P + G + 1).
torch::Tensor soft_dice_loss(const torch::Tensor& probs, const torch::Tensor& target_onehot);
torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& target);

struct SegArtifacts {
  Orientation orientation = Orientation::kSagittal;
  TapPoint tap;
  UNet3D backbone{nullptr};
  SegHead head{nullptr};
  std::vector<double> epoch_losses;
};

SegArtifacts train_segmentation(const DatasetIndex& dataset, Orientation o, const TapPoint& tap,
                                const TrainPlan& plan, UNet3D& init_backbone,
                                const NoiseSchedule& sched,
                                const std::vector<std::string>* patient_subset = nullptr);

// Mean Dice per structure class over every masked scan of the records.
std::map<int, double> evaluate_segmentation(SegArtifacts& a,
                                            const std::vector<const StudyRecord*>& records,
                                            const NoiseSchedule& sched, std::uint64_t noise_seed);

// ---------------------------------------------------------------- selection

struct ConfigSelection {
  std::array<TapPoint, 3> taps;  // per orientation
  ProbeSetting setting = ProbeSetting::kLinearProbe;
  std::string task = "diagnosis";
  double validation_score = 0.0;
  std::array<std::vector<TapPoint>, 3> candidates;  // top four per orientation
  std::size_t evaluated_combinations = 0;
};

using GridResults = std::map<Orientation, std::map<TapPoint, double>>;
using CandidateEvaluator = std::function<double(const std::array<TapPoint, 3>&)>;

// Keeps the four best taps per orientation (ties: smaller timestep, lower block),
// scores all 4^3 combinations with `evaluate` and returns the arg-max; ties go to
// the lexicographically smallest (sag, cor, ax) tap triple.
ConfigSelection select_config(const GridResults& grid, const CandidateEvaluator& evaluate,
                              ProbeSetting setting = ProbeSetting::kLinearProbe,
                              std::size_t top_k = 4);

// ---------------------------------------------------------------- label efficiency

struct CurvePoint {
  double fraction = 1.0;
  std::string metric;
  double value = 0.0;
  std::string arm;
  std::vector<std::optional<double>> per_label;
  std::vector<std::size_t> skipped_labels;
};

// Trains one arm per fraction on nested subsets and evaluates on the test split.
using FractionTrainer = std::function<CurvePoint(double fraction,
                                                 const std::vector<std::string>& subset)>;

std::vector<CurvePoint> label_efficiency_run(const DatasetIndex& dataset,
                                             const std::vector<double>& fractions,
                                             std::uint64_t subset_seed,
                                             const FractionTrainer& train_and_evaluate);

std::string curve_csv(const std::vector<CurvePoint>& curve);

}  // namespace orthodiff
