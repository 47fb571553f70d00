#include "saan/metrics.hpp"

#include <cmath>

#include <json.hpp>

namespace saan {

MetricsReport MetricsReport::from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn) {
  MetricsReport r;
  r.tp = tp;
  r.fp = fp;
  r.fn = fn;
  r.tn = tn;
  if (tp == 0 && fp == 0 && fn == 0) {
    r.precision = r.recall = r.f1 = r.iou = 1.0;
    return r;
  }
  const auto ratio = [](std::int64_t num, std::int64_t den) {
    return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
  };
  r.precision = ratio(tp, tp + fp);
  r.recall = ratio(tp, tp + fn);
  r.f1 = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  r.iou = ratio(tp, tp + fn + fp);
  return r;
}

double MetricsReport::accuracy() const {
  return total() > 0 ? static_cast<double>(tp + tn) / static_cast<double>(total()) : 0.0;
}

MetricsReport& MetricsReport::operator+=(const MetricsReport& other) {
  *this = from_counts(tp + other.tp, fp + other.fp, fn + other.fn, tn + other.tn);
  return *this;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["tp"] = tp;
  j["fp"] = fp;
  j["fn"] = fn;
  j["tn"] = tn;
  j["precision"] = precision;
  j["recall"] = recall;
  j["f1"] = f1;
  j["iou"] = iou;
  return j.dump();
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    MetricsReport r;
    r.tp = j.at("tp").get<std::int64_t>();
    r.fp = j.at("fp").get<std::int64_t>();
    r.fn = j.at("fn").get<std::int64_t>();
    r.tn = j.at("tn").get<std::int64_t>();
    r.precision = j.at("precision").get<double>();
    r.recall = j.at("recall").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.iou = j.at("iou").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  }
}

template <typename S>
MetricsReport compute_metrics_from_probabilities(const Tensor<S>& probabilities, const Tensor<S>& labels,
                                                 double threshold) {
  if (probabilities.size() != labels.size())
    throw DimensionError("metrics: prediction " + to_string(probabilities.shape()) + " vs labels " +
                         to_string(labels.shape()));
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (Index i = 0; i < labels.size(); ++i) {
    const bool pred = static_cast<double>(probabilities[i]) >= threshold;
    const bool truth = labels[i] > S(0.5);
    tp += pred && truth;
    fp += pred && !truth;
    fn += !pred && truth;
    tn += !pred && !truth;
  }
  return MetricsReport::from_counts(tp, fp, fn, tn);
}

template <typename S>
MetricsReport compute_metrics(const Tensor<S>& logits, const Tensor<S>& labels, double threshold) {
  // sigmoid(x) >= t  <=>  x >= log(t / (1 - t))
  const double cut = std::log(threshold / (1.0 - threshold));
  Tensor<S> pred(logits.shape());
  for (Index i = 0; i < logits.size(); ++i) pred[i] = static_cast<double>(logits[i]) >= cut ? S(1) : S(0);
  return compute_metrics_from_probabilities(pred, labels, 0.5);
}

template MetricsReport compute_metrics(const Tensor<float>&, const Tensor<float>&, double);
template MetricsReport compute_metrics(const Tensor<double>&, const Tensor<double>&, double);
template MetricsReport compute_metrics_from_probabilities(const Tensor<float>&, const Tensor<float>&, double);
template MetricsReport compute_metrics_from_probabilities(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace saan
