#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "densepipe/dataset.hpp"
#include "densepipe/error.hpp"
#include "densepipe/model.hpp"
#include "densepipe/train.hpp"

namespace densepipe {

/// Argmax per sample over eval-mode logits; ties go to the lower class index.
inline std::vector<int> predict_labels(const ModelGraph& model, const TensorDataset& data, std::size_t batch_size = 16) {
  if (batch_size < 1) throw ParameterError("batch size must be positive");
  std::vector<int> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  const std::size_t classes = model.config.num_classes;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, data.size());
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const ForwardPass pass = infer(model, data.batch(idx));
    for (std::size_t i = 0; i < idx.size(); ++i) out.push_back(argmax_row(pass.logits().data() + i * classes, classes));
  }
  return out;
}

/// Counts with a designated positive class (index 0, "female", by default):
/// rows are the actual class, columns the predicted class.
struct ConfusionMatrix {
  std::size_t tp = 0, fn = 0, fp = 0, tn = 0;

  std::size_t total() const noexcept { return tp + fn + fp + tn; }
  /// Same predictions with the other class treated as positive.
  ConfusionMatrix swapped() const noexcept { return {tn, fp, fn, tp}; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(std::span<const int> actual, std::span<const int> predicted, int positive = 0) {
  if (actual.size() != predicted.size()) throw DataError("actual and predicted label counts differ");
  if (positive != 0 && positive != 1) throw ParameterError("positive class must be 0 or 1");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const int a = actual[i], p = predicted[i];
    if ((a != 0 && a != 1) || (p != 0 && p != 1)) throw DataError("confusion matrix needs binary labels");
    const bool ap = a == positive, pp = p == positive;
    if (ap && pp) ++cm.tp;
    else if (ap) ++cm.fn;
    else if (pp) ++cm.fp;
    else ++cm.tn;
  }
  return cm;
}

struct MetricsReport {
  double accuracy = 0.0, precision = 0.0, recall = 0.0, specificity = 0.0, f1 = 0.0;
  // Set when the ratio was 0/0 and reported as 0.
  bool precision_undefined = false, recall_undefined = false, specificity_undefined = false, f1_undefined = false;
};

inline MetricsReport metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DataError("metrics of an empty confusion matrix");
  MetricsReport r;
  const auto ratio = [](std::size_t num, std::size_t den, bool& undefined) {
    if (den == 0) {
      undefined = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  bool unused = false;
  r.accuracy = ratio(cm.tp + cm.tn, cm.total(), unused);
  r.precision = ratio(cm.tp, cm.tp + cm.fp, r.precision_undefined);
  r.recall = ratio(cm.tp, cm.tp + cm.fn, r.recall_undefined);
  r.specificity = ratio(cm.tn, cm.tn + cm.fp, r.specificity_undefined);
  if (r.precision + r.recall > 0.0) {
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  } else {
    r.f1_undefined = true;
  }
  return r;
}

/// Harmonic mean of precision and recall; 0 when both are 0.
inline double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

struct LatencyReport {
  double mean_ms = 0.0, stddev_ms = 0.0, min_ms = 0.0, max_ms = 0.0;
  std::size_t runs = 0;
  std::size_t images = 0;
};

/// Per-image wall-clock latency of single-image eval forwards. Each run is a
/// pass over the dataset; the statistics are over the per-run mean latency.
inline LatencyReport bench_inference(const ModelGraph& model, const TensorDataset& data, std::size_t warmup,
                                     std::size_t runs) {
  if (data.size() == 0) throw DataError("cannot benchmark on an empty dataset");
  if (runs < 1) throw ParameterError("bench needs at least one run");
  using clock = std::chrono::steady_clock;
  const auto pass = [&] {
    for (std::size_t i = 0; i < data.size(); ++i) {
      const ForwardPass p = infer(model, data.sample(i));
      (void)p;
    }
  };
  for (std::size_t w = 0; w < warmup; ++w) pass();
  std::vector<double> per_image;
  for (std::size_t r = 0; r < runs; ++r) {
    const auto t0 = clock::now();
    pass();
    const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    per_image.push_back(ms / static_cast<double>(data.size()));
  }
  LatencyReport rep;
  rep.runs = runs;
  rep.images = data.size();
  rep.mean_ms = std::accumulate(per_image.begin(), per_image.end(), 0.0) / static_cast<double>(runs);
  double ss = 0.0;
  for (double v : per_image) ss += (v - rep.mean_ms) * (v - rep.mean_ms);
  rep.stddev_ms = runs > 1 ? std::sqrt(ss / static_cast<double>(runs - 1)) : 0.0;
  rep.min_ms = *std::min_element(per_image.begin(), per_image.end());
  rep.max_ms = *std::max_element(per_image.begin(), per_image.end());
  // Guard the ordering against rounding of the mean.
  rep.mean_ms = std::clamp(rep.mean_ms, rep.min_ms, rep.max_ms);
  return rep;
}

}  // namespace densepipe
