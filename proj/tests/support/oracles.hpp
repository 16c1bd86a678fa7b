#pragma once

// Brute-force reference implementations used to cross-check the metric code.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iterator>
#include <optional>
#include <set>
#include <vector>

namespace orthodiff::oracle {

// Exhaustive positive/negative pair counting; ties contribute 1/2.
inline std::optional<double> auroc_pairs(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      ++pairs;
      if (s[i] > s[j]) wins += 1.0;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  if (pairs == 0) return std::nullopt;
  return wins / static_cast<double>(pairs);
}

// Walk every distinct score as a threshold (descending) and sum precision times
// the recall gained at that threshold.
inline std::optional<double> ap_thresholds(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::size_t positives = 0;
  for (auto v : y) positives += v;
  if (positives == 0) return std::nullopt;
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double ap = 0.0;
  double prev_recall = 0.0;
  for (double th : thresholds) {
    std::size_t tp = 0, predicted = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= th) {
        ++predicted;
        tp += y[i];
      }
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(predicted);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

inline double dice_sets(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, std::uint8_t c) {
  std::set<std::size_t> a, b, both;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == c) a.insert(i);
    if (gt[i] == c) b.insert(i);
  }
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::inserter(both, both.begin()));
  if (a.empty() && b.empty()) return 1.0;
  return 2.0 * static_cast<double>(both.size()) / static_cast<double>(a.size() + b.size());
}

// Exact one-sided sign-flip p-value by enumerating all 2^n patterns.
inline double sign_flip_exact(const std::vector<double>& d) {
  const std::size_t n = d.size();
  double observed = 0.0;
  for (double v : d) observed += v;
  std::uint64_t hits = 0;
  const std::uint64_t total = std::uint64_t{1} << n;
  for (std::uint64_t mask = 0; mask < total; ++mask) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += (mask >> i & 1U) ? -d[i] : d[i];
    if (sum >= observed - 1e-12) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace orthodiff::oracle
