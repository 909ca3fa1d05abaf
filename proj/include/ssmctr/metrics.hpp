#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmctr/ops.hpp"

namespace ssmctr {

/// A metric that is undefined for the given input.
class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting one half. One sort; tied scores
/// share their average rank.
inline double auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) {
    throw DimensionError("auc: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (scores.empty()) throw MetricError("auc: no examples");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positives = 0.0;
  double rank_sum = 0.0;  // sum of 1-based ranks of positives
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    double pos_in_group = 0.0;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]] != 0.0) pos_in_group += 1.0;
      ++j;
    }
    // ranks i+1 .. j share the average (i + 1 + j) / 2
    rank_sum += pos_in_group * (static_cast<double>(i + 1 + j) / 2.0);
    positives += pos_in_group;
    i = j;
  }
  const double negatives = static_cast<double>(n) - positives;
  if (positives == 0.0 || negatives == 0.0) {
    throw MetricError("undefined AUC: labels contain a single class");
  }
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

/// Relative AUC improvement over a base model, in percent.
inline double rela_impr(double auc_measured, double auc_base) {
  if (auc_base == 0.5) throw MetricError("rela_impr: base AUC is 0.5 (division by zero)");
  return ((auc_measured - 0.5) / (auc_base - 0.5) - 1.0) * 100.0;
}

/// Mean log loss of labels under sigmoid(logits), summed in input order.
inline double logloss_from_logits(std::span<const double> logits,
                                  std::span<const double> labels) {
  if (logits.empty()) throw MetricError("logloss: no examples");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    total += softplus(logits[i]) - labels[i] * logits[i];
  }
  return total / static_cast<double>(logits.size());
}

}  // namespace ssmctr
