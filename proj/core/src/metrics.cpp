#include "orthodiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "orthodiff/errors.hpp"

namespace orthodiff::metrics {

void ScoredLabels::validate() const {
  if (scores.size() != truth.size()) {
    throw ShapeError("scores and truth differ in length");
  }
  for (auto t : truth) {
    if (t > 1) throw ValidationError("truth must be binary");
  }
}

std::optional<double> auroc(const ScoredLabels& s) {
  s.validate();
  // Rank-sum with average ranks for ties equals pairwise counting with ties as 1/2.
  const std::size_t n = s.scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return s.scores[a] < s.scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && s.scores[order[j + 1]] == s.scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t q = i; q <= j; ++q) rank[order[q]] = avg;
    i = j + 1;
  }
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (s.truth[i]) {
      pos += 1;
      rank_sum += rank[i];
    } else {
      neg += 1;
    }
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

std::optional<double> average_precision(const ScoredLabels& s) {
  s.validate();
  const std::size_t n = s.scores.size();
  const auto total_pos =
      static_cast<double>(std::count(s.truth.begin(), s.truth.end(), std::uint8_t{1}));
  if (total_pos == 0) return std::nullopt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
  double tp = 0, fp = 0, prev_recall = 0, ap = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && s.scores[order[j]] == s.scores[order[i]]) {
      if (s.truth[order[j]]) tp += 1; else fp += 1;
      ++j;
    }
    const double recall = tp / total_pos;
    const double precision = tp / (tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

ScoredLabels MultiLabelScores::column(std::size_t j) const {
  ScoredLabels out;
  out.scores.reserve(n);
  out.truth.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.scores.push_back(score(i, j));
    out.truth.push_back(label(i, j));
  }
  return out;
}

void MultiLabelScores::validate() const {
  if (scores.size() != n * k || truth.size() != n * k) {
    throw ShapeError("multi-label matrices do not match n x k");
  }
}

PrfResult multilabel_prf(const MultiLabelScores& m, double threshold) {
  m.validate();
  PrfResult r;
  double sum_tp = 0, sum_fp = 0, sum_fn = 0;
  double sum_p = 0, sum_r = 0, sum_f1 = 0;
  for (std::size_t j = 0; j < m.k; ++j) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < m.n; ++i) {
      const bool pred = m.score(i, j) >= threshold;
      const bool truth = m.label(i, j) != 0;
      if (pred && truth) tp += 1;
      else if (pred) fp += 1;
      else if (truth) fn += 1;
    }
    double precision = 0, recall = 0;
    if (tp + fp > 0) precision = tp / (tp + fp);
    else r.undefined_precision_labels.push_back(j);
    if (tp + fn > 0) recall = tp / (tp + fn);
    else r.undefined_recall_labels.push_back(j);
    const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    sum_p += precision;
    sum_r += recall;
    sum_f1 += f1;
    sum_tp += tp;
    sum_fp += fp;
    sum_fn += fn;
  }
  if (m.k > 0) {
    const auto k = static_cast<double>(m.k);
    r.cp = sum_p / k;
    r.cr = sum_r / k;
    r.cf1 = sum_f1 / k;
  }
  if (sum_tp + sum_fp > 0) r.op = sum_tp / (sum_tp + sum_fp);
  else r.overall_precision_undefined = true;
  if (sum_tp + sum_fn > 0) r.orec = sum_tp / (sum_tp + sum_fn);
  else r.overall_recall_undefined = true;
  r.of1 = r.op + r.orec > 0 ? 2 * r.op * r.orec / (r.op + r.orec) : 0.0;
  return r;
}

double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
            std::uint8_t class_id) {
  if (pred.size() != gt.size()) throw ShapeError("dice: prediction and truth differ in size");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool in_a = pred[i] == class_id;
    const bool in_b = gt[i] == class_id;
    a += in_a;
    b += in_b;
    both += in_a && in_b;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

PermutationResult permutation_test(std::span<const double> diffs, std::uint64_t n_resamples,
                                   std::uint64_t seed) {
  const std::size_t n = diffs.size();
  if (n == 0) throw ValidationError("permutation_test needs at least one difference");
  double observed = 0, scale = 0;
  for (double d : diffs) {
    observed += d;
    scale += std::abs(d);
  }
  const double tol = 1e-12 * (scale + 1.0);
  auto flipped_sum = [&](auto&& sign_of) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += sign_of(i) ? -diffs[i] : diffs[i];
    return s;
  };

  PermutationResult r;
  const bool fits = n < 63 && (std::uint64_t{1} << n) <= n_resamples;
  if (fits) {
    const std::uint64_t total = std::uint64_t{1} << n;
    std::uint64_t hits = 0;
    for (std::uint64_t mask = 0; mask < total; ++mask) {
      const double s = flipped_sum([&](std::size_t i) { return (mask >> i) & 1U; });
      if (s >= observed - tol) ++hits;
    }
    r.p_value = static_cast<double>(hits) / static_cast<double>(total);
    r.exact = true;
    r.resamples = total;
    return r;
  }
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::uint64_t hits = 0;
  std::vector<bool> flips(n);
  for (std::uint64_t b = 0; b < n_resamples; ++b) {
    for (std::size_t i = 0; i < n; ++i) flips[i] = coin(rng);
    const double s = flipped_sum([&](std::size_t i) { return flips[i]; });
    if (s >= observed - tol) ++hits;
  }
  r.p_value = static_cast<double>(hits + 1) / static_cast<double>(n_resamples + 1);
  r.exact = false;
  r.resamples = n_resamples;
  return r;
}

MacroAuc macro_auc(const MultiLabelScores& m) {
  m.validate();
  MacroAuc out;
  double sum = 0;
  std::size_t defined = 0;
  for (std::size_t j = 0; j < m.k; ++j) {
    if (auto a = auroc(m.column(j))) {
      sum += *a;
      ++defined;
    } else {
      out.undefined_labels.push_back(j);
    }
  }
  if (defined > 0) out.value = sum / static_cast<double>(defined);
  return out;
}

MetricReport evaluate_classification(const MultiLabelScores& m, double threshold) {
  MetricReport r;
  r.threshold = threshold;
  for (std::size_t j = 0; j < m.k; ++j) {
    const auto col = m.column(j);
    r.per_label_auroc.push_back(auroc(col));
    r.per_label_ap.push_back(average_precision(col));
  }
  r.macro = macro_auc(m);
  r.prf = multilabel_prf(m, threshold);
  return r;
}

namespace {

std::string label_name(const std::vector<std::string>& names, std::size_t j) {
  return j < names.size() ? names[j] : "label" + std::to_string(j);
}

bool contains(const std::vector<std::size_t>& v, std::size_t x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

std::string format_value(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::vector<MetricEntry> MetricReport::entries(const std::vector<std::string>& names) const {
  std::vector<MetricEntry> out;
  for (std::size_t j = 0; j < per_label_auroc.size(); ++j) {
    const auto name = label_name(names, j);
    const auto& a = per_label_auroc[j];
    out.push_back({name, "auroc", a.value_or(0.0), a ? "" : "undefined"});
    const auto& ap = j < per_label_ap.size() ? per_label_ap[j] : std::nullopt;
    out.push_back({name, "ap", ap.value_or(0.0), ap ? "" : "undefined"});
  }
  out.push_back({"all", "macro_auc", macro.value.value_or(0.0), macro.value ? "" : "undefined"});
  const bool any_p = !prf.undefined_precision_labels.empty();
  const bool any_r = !prf.undefined_recall_labels.empty();
  out.push_back({"all", "CP", prf.cp, any_p ? "zero_convention" : ""});
  out.push_back({"all", "CR", prf.cr, any_r ? "zero_convention" : ""});
  out.push_back({"all", "CF1", prf.cf1, any_p || any_r ? "zero_convention" : ""});
  out.push_back({"all", "OP", prf.op, prf.overall_precision_undefined ? "zero_convention" : ""});
  out.push_back({"all", "OR", prf.orec, prf.overall_recall_undefined ? "zero_convention" : ""});
  out.push_back({"all", "OF1", prf.of1, ""});
  out.push_back({"all", "threshold", threshold, ""});
  for (const auto& [cls, d] : mean_dice_per_class) {
    out.push_back({"class" + std::to_string(cls), "dice", d, ""});
  }
  return out;
}

std::string MetricReport::to_csv(const std::vector<std::string>& names) const {
  std::ostringstream os;
  os << "label,metric,value,flag\n";
  for (const auto& e : entries(names)) {
    os << e.label << ',' << e.metric << ',' << format_value(e.value) << ',' << e.flag << '\n';
  }
  return os.str();
}

std::string MetricReport::to_json(const std::vector<std::string>& names) const {
  nlohmann::ordered_json j;
  auto per_label = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < per_label_auroc.size(); ++l) {
    nlohmann::ordered_json e;
    e["label"] = label_name(names, l);
    e["auroc"] = per_label_auroc[l] ? nlohmann::ordered_json(*per_label_auroc[l]) : nlohmann::ordered_json(nullptr);
    e["ap"] = l < per_label_ap.size() && per_label_ap[l]
                  ? nlohmann::ordered_json(*per_label_ap[l])
                  : nlohmann::ordered_json(nullptr);
    e["precision_flag"] = contains(prf.undefined_precision_labels, l) ? "zero_convention" : "";
    per_label.push_back(e);
  }
  j["per_label"] = per_label;
  j["macro_auc"] = macro.value ? nlohmann::ordered_json(*macro.value) : nlohmann::ordered_json(nullptr);
  j["macro_auc_excluded_labels"] = macro.undefined_labels;
  j["CP"] = prf.cp;
  j["CR"] = prf.cr;
  j["CF1"] = prf.cf1;
  j["OP"] = prf.op;
  j["OR"] = prf.orec;
  j["OF1"] = prf.of1;
  j["threshold"] = threshold;
  j["undefined_precision_labels"] = prf.undefined_precision_labels;
  j["undefined_recall_labels"] = prf.undefined_recall_labels;
  if (!mean_dice_per_class.empty()) {
    nlohmann::ordered_json d;
    for (const auto& [cls, v] : mean_dice_per_class) d[std::to_string(cls)] = v;
    j["mean_dice_per_class"] = d;
  }
  return j.dump(2);
}

}  // namespace orthodiff::metrics
