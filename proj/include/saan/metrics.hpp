#pragma once

#include <cstdint>
#include <string>

#include "saan/tensor.hpp"

namespace saan {

/// Binary change-detection scores from a pixel confusion matrix.
///
/// A metric whose denominator is zero is reported as 0, except when the
/// tile has no positives at all in either prediction or ground truth
/// (tp = fp = fn = 0), where precision, recall, F1 and IoU are all 1.
struct MetricsReport {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0, iou = 0;

  static MetricsReport from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn);

  std::int64_t total() const { return tp + fp + fn + tn; }
  double accuracy() const;
  /// Sums counts and recomputes the scores.
  MetricsReport& operator+=(const MetricsReport& other);

  /// {"tp":..,"fp":..,"fn":..,"tn":..,"precision":..,"recall":..,"f1":..,"iou":..}
  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
};

/// Binarizes sigmoid(logits) >= threshold against a {0,1} mask.
template <typename S>
MetricsReport compute_metrics(const Tensor<S>& logits, const Tensor<S>& labels, double threshold = 0.5);

/// Same, for maps that already hold probabilities in [0,1].
template <typename S>
MetricsReport compute_metrics_from_probabilities(const Tensor<S>& probabilities, const Tensor<S>& labels,
                                                 double threshold = 0.5);

}  // namespace saan
