#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "topomil/matrix.hpp"

namespace topomil {

struct MetricsReport {
  double accuracy = 0.0;
  double f1 = 0.0;
  double auroc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  /// Classes without both positive and negative examples; left out of the
  /// AUROC mean. When no class has a defined AUROC it is reported as 0.5.
  std::vector<std::size_t> auroc_skipped_classes;

  bool auroc_partial() const { return !auroc_skipped_classes.empty(); }
};

/// Area under the ROC curve of `scores` for the positives. Uses mid-ranks, so
/// a tied positive/negative pair counts one half. Undefined without both
/// positives and negatives.
inline double auroc(std::span<const double> scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  if (positive.size() != n) throw std::invalid_argument("auroc: size mismatch");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t lo = 0; lo < n;) {
    std::size_t hi = lo;
    while (hi < n && scores[order[hi]] == scores[order[lo]]) ++hi;
    const double mid_rank = 0.5 * static_cast<double>(lo + 1 + hi);  // mean of ranks lo+1 .. hi
    for (std::size_t k = lo; k < hi; ++k)
      if (positive[order[k]]) {
        pos_rank_sum += mid_rank;
        ++n_pos;
      }
    lo = hi;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::domain_error("auroc: needs both positives and negatives");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

/// Metrics from true labels and an n x c matrix of class probabilities.
/// Predictions are the argmax (lowest class on ties). Precision, recall and
/// F1 are unweighted means over all c classes with 0/0 taken as 0. AUROC is
/// one-vs-rest per class, macro-averaged; a binary problem reports class 1.
inline MetricsReport compute_metrics(std::span<const std::size_t> labels, const Matrix& probs) {
  const std::size_t n = labels.size(), c = probs.cols();
  if (probs.rows() != n) throw std::invalid_argument("compute_metrics: label/probability count mismatch");
  if (n == 0 || c < 2) throw std::invalid_argument("compute_metrics: need samples and >= 2 classes");
  MetricsReport r;
  std::vector<std::size_t> tp(c, 0), fp(c, 0), fn(c, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw std::out_of_range("compute_metrics: label outside class range");
    auto row = probs.row_view(i);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == labels[i]) {
      ++correct;
      ++tp[pred];
    } else {
      ++fp[pred];
      ++fn[labels[i]];
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  for (std::size_t k = 0; k < c; ++k) {
    const double p = ratio(tp[k], tp[k] + fp[k]);
    const double rc = ratio(tp[k], tp[k] + fn[k]);
    r.precision += p;
    r.recall += rc;
    r.f1 += (p + rc) == 0.0 ? 0.0 : 2.0 * p * rc / (p + rc);
  }
  r.precision /= static_cast<double>(c);
  r.recall /= static_cast<double>(c);
  r.f1 /= static_cast<double>(c);

  std::vector<std::size_t> auc_classes;
  if (c == 2) auc_classes = {1};
  else
    for (std::size_t k = 0; k < c; ++k) auc_classes.push_back(k);
  double auc_sum = 0.0;
  std::size_t auc_count = 0;
  std::vector<double> scores(n);
  std::vector<bool> positive(n);
  for (std::size_t k : auc_classes) {
    std::size_t np = 0;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = probs(i, k);
      positive[i] = labels[i] == k;
      np += labels[i] == k;
    }
    if (np == 0 || np == n) {
      r.auroc_skipped_classes.push_back(k);
      continue;
    }
    auc_sum += auroc(scores, positive);
    ++auc_count;
  }
  r.auroc = auc_count ? auc_sum / static_cast<double>(auc_count) : 0.5;
  return r;
}

}  // namespace topomil
