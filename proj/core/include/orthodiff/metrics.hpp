#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace orthodiff::metrics {

// Scores and binary ground truth for one label.
struct ScoredLabels {
  std::vector<double> scores;
  std::vector<std::uint8_t> truth;

  void validate() const;
};

// Mann-Whitney AUROC; ties between a positive and a negative count 1/2.
// nullopt when truth holds a single class.
std::optional<double> auroc(const ScoredLabels& s);

// Step-wise AP over descending distinct thresholds; tied scores form one step.
// nullopt when there are no positives.
std::optional<double> average_precision(const ScoredLabels& s);

// Row-major N x K matrices.
struct MultiLabelScores {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> truth;

  double score(std::size_t i, std::size_t j) const { return scores[i * k + j]; }
  std::uint8_t label(std::size_t i, std::size_t j) const { return truth[i * k + j]; }
  ScoredLabels column(std::size_t j) const;
  void validate() const;
};

struct PrfResult {
  double cp = 0, cr = 0, cf1 = 0;
  double op = 0, orec = 0, of1 = 0;
  // Labels whose precision was undefined (no predicted positives) and set to 0.
  std::vector<std::size_t> undefined_precision_labels;
  // Labels whose recall was undefined (no true positives in truth) and set to 0.
  std::vector<std::size_t> undefined_recall_labels;
  bool overall_precision_undefined = false;
  bool overall_recall_undefined = false;
};

inline constexpr double kDefaultThreshold = 0.5;

// CP/CR/CF1 are unweighted label means (CF1 = mean of per-label F1);
// OP/OR/OF1 are computed from pooled confusion counts.
PrfResult multilabel_prf(const MultiLabelScores& m, double threshold = kDefaultThreshold);

// 2|A n B| / (|A| + |B|) over voxels equal to class_id; both empty gives 1.
double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
            std::uint8_t class_id);

struct PermutationResult {
  double p_value = 1.0;
  bool exact = true;
  std::uint64_t resamples = 0;
};

// One-sided sign-flip test of mean(diff) > 0. Exact enumeration when 2^n fits in
// n_resamples, seeded Monte Carlo otherwise; the observed assignment is counted.
PermutationResult permutation_test(std::span<const double> diffs, std::uint64_t n_resamples,
                                   std::uint64_t seed = 0);

struct MacroAuc {
  std::optional<double> value;
  std::vector<std::size_t> undefined_labels;
};

MacroAuc macro_auc(const MultiLabelScores& m);

// Per-label and aggregate classification report; undefined entries carry a flag.
struct MetricEntry {
  std::string label;
  std::string metric;
  double value = 0.0;
  std::string flag;  // empty, "undefined", or "zero_convention"
};

struct MetricReport {
  std::vector<std::optional<double>> per_label_auroc;
  std::vector<std::optional<double>> per_label_ap;
  MacroAuc macro;
  PrfResult prf;
  double threshold = kDefaultThreshold;
  std::map<int, double> mean_dice_per_class;

  std::vector<MetricEntry> entries(const std::vector<std::string>& label_names = {}) const;
  std::string to_csv(const std::vector<std::string>& label_names = {}) const;
  std::string to_json(const std::vector<std::string>& label_names = {}) const;
};

MetricReport evaluate_classification(const MultiLabelScores& m,
                                     double threshold = kDefaultThreshold);

}  // namespace orthodiff::metrics
