#pragma once

#include "amortix/masking.hpp"
#include "amortix/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace amortix {

/// AUROC as an exact fraction: (2 * concordant + ties) / (2 * n_pos * n_neg).
struct AurocFraction {
  std::uint64_t numerator = 0;
  std::uint64_t denominator = 0;
  double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
};

/// Rank-sum (Mann-Whitney) AUROC with tied scores given half credit.
/// Absent when either class is missing.
inline std::optional<AurocFraction> auroc_fraction(std::span<const double> scores, std::span<const int> positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Doubled mid-ranks keep everything integral: tie block [i, j) gets i + j + 1.
  std::uint64_t rank2_pos = 0, n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t t = i; t < j; ++t)
      if (positive[order[t]]) {
        rank2_pos += i + j + 1;
        ++n_pos;
      }
    i = j;
  }
  const std::uint64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return AurocFraction{rank2_pos - n_pos * (n_pos + 1), 2 * n_pos * n_neg};
}

inline std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels) {
  auto f = auroc_fraction(scores, labels);
  if (!f) return std::nullopt;
  return f->value();
}

/// Binary: AUROC of column 1. Multiclass: macro one-vs-rest over classes that
/// have both positives and negatives.
inline std::optional<double> auroc_probs(const Matrix& probs, std::span<const int> labels) {
  const auto n = probs.rows();
  std::vector<double> scores(static_cast<std::size_t>(n));
  std::vector<int> pos(static_cast<std::size_t>(n));
  auto one_vs_rest = [&](int k) {
    for (Eigen::Index i = 0; i < n; ++i) {
      scores[static_cast<std::size_t>(i)] = probs(i, k);
      pos[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)] == k ? 1 : 0;
    }
    return auroc(scores, pos);
  };
  if (probs.cols() == 2) return one_vs_rest(1);
  double sum = 0;
  int used = 0;
  for (int k = 0; k < probs.cols(); ++k)
    if (auto a = one_vs_rest(k)) {
      sum += *a;
      ++used;
    }
  if (used == 0) return std::nullopt;
  return sum / used;
}

inline double accuracy(const Matrix& probs, std::span<const int> labels) {
  if (probs.rows() == 0) return 0.0;
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index arg;
    probs.row(i).maxCoeff(&arg);
    hit += static_cast<int>(arg) == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(hit) / static_cast<double>(probs.rows());
}

struct SelectionMetrics {
  double cfsr = 0.0;  // instances whose mask contains every control feature
  double tpr = 0.0;   // mean |mask & truth| / |truth|
  double fdr = 0.0;   // mean |mask \ truth| / |mask|, 0 for an empty mask
};

inline SelectionMetrics selection_metrics(const std::vector<SelectionVector>& masks,
                                          const std::vector<std::vector<int>>& ground_truth,
                                          const std::vector<int>& control_features) {
  require_dims(masks.size() == ground_truth.size(), "selection_metrics: masks vs ground truth count");
  SelectionMetrics m;
  if (masks.empty()) return m;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto& mask = masks[i];
    const auto& truth = ground_truth[i];
    bool all_control = !control_features.empty();
    for (int c : control_features) all_control = all_control && mask[static_cast<std::size_t>(c)];
    m.cfsr += all_control ? 1.0 : 0.0;
    std::size_t selected = 0, hit = 0;
    for (std::size_t j = 0; j < mask.size(); ++j) selected += mask[j];
    for (int j : truth) hit += mask[static_cast<std::size_t>(j)];
    m.tpr += truth.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(truth.size());
    m.fdr += selected == 0 ? 0.0 : static_cast<double>(selected - hit) / static_cast<double>(selected);
  }
  const double n = static_cast<double>(masks.size());
  m.cfsr /= n;
  m.tpr /= n;
  m.fdr /= n;
  return m;
}

inline double mean_selection_size(const Matrix& masks) {
  return masks.rows() ? masks.sum() / static_cast<double>(masks.rows()) : 0.0;
}

}  // namespace amortix
