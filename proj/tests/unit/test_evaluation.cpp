#include <gtest/gtest.h>

#include "common/fixtures.hpp"
#include "common/grad_cases.hpp"
#include "densepipe/metrics.hpp"

namespace densepipe {
namespace {

using testing::tiny_config;

// A model whose logits equal the classifier bias, whatever the input.
ModelGraph constant_logits(double a, double b) {
  ModelGraph m = build_model(tiny_config());
  for (double& v : m.graph.params.at("classifier.weight").values()) v = 0.0;
  m.graph.params.at("classifier.bias") = Tensor({2}, {a, b});
  return m;
}

TEST(Predict, ArgmaxAndTies) {
  const TensorDataset d = testing::synthetic_set(3, 1);
  EXPECT_EQ(predict_labels(constant_logits(0.2, 0.8), d), (std::vector<int>{1, 1, 1}));
  EXPECT_EQ(predict_labels(constant_logits(0.5, 0.5), d), (std::vector<int>{0, 0, 0}));
  const double tie[] = {0.3, 0.3, 0.1};
  EXPECT_EQ(argmax_row(tie, 3), 0);
}

TEST(Predict, BatchedMatchesSingle) {
  const ModelGraph m = build_model(tiny_config(4));
  TensorDataset d;
  d.classes = {"female", "male"};
  Rng rng(10);
  d.images = testing::random_tensor({100, 1, 32, 32}, rng, 0.0, 1.0);
  d.labels.assign(100, 0);
  EXPECT_EQ(predict_labels(m, d, 16), predict_labels(m, d, 1));
}

TEST(Confusion, Cells) {
  const std::vector<int> actual{0, 0, 1, 1}, predicted{0, 1, 0, 1};
  const ConfusionMatrix cm = confusion(actual, predicted);
  EXPECT_EQ(cm, (ConfusionMatrix{1, 1, 1, 1}));
  const ConfusionMatrix perfect = confusion(actual, actual);
  EXPECT_EQ(perfect.fn + perfect.fp, 0u);
  EXPECT_THROW(confusion(actual, std::vector<int>{0, 1}), DataError);
  EXPECT_THROW(confusion(std::vector<int>{0, 2}, std::vector<int>{0, 1}), DataError);
}

TEST(Confusion, RandomVectorsAgainstBruteForce) {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(200);
    std::vector<int> a(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<int>(rng.below(2));
      p[i] = static_cast<int>(rng.below(2));
    }
    const ConfusionMatrix cm = confusion(a, p);
    ASSERT_EQ(cm.total(), n);
    double tp = 0, fn = 0, fp = 0, tn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      tp += a[i] == 0 && p[i] == 0;
      fn += a[i] == 0 && p[i] == 1;
      fp += a[i] == 1 && p[i] == 0;
      tn += a[i] == 1 && p[i] == 1;
    }
    const MetricsReport m = metrics(cm);
    ASSERT_NEAR(m.accuracy, (tp + tn) / n, 1e-12);
    if (tp + fp > 0) ASSERT_NEAR(m.precision, tp / (tp + fp), 1e-12);
    if (tp + fn > 0) ASSERT_NEAR(m.recall, tp / (tp + fn), 1e-12);
    if (tn + fp > 0) ASSERT_NEAR(m.specificity, tn / (tn + fp), 1e-12);
    if (m.precision > 0 && m.recall > 0) {
      ASSERT_LE(m.f1, std::max(m.precision, m.recall) + 1e-15);
      ASSERT_GE(m.f1, std::min(m.precision, m.recall) - 1e-15);
    }
    // Swapping the positive class mirrors the matrix and keeps accuracy.
    const ConfusionMatrix swapped = confusion(a, p, 1);
    ASSERT_EQ(swapped, (ConfusionMatrix{cm.tn, cm.fp, cm.fn, cm.tp}));
    ASSERT_NEAR(metrics(swapped).accuracy, m.accuracy, 1e-15);
  }
}

TEST(Metrics, WorkedExample) {
  const MetricsReport m = metrics({50, 10, 5, 35});
  EXPECT_NEAR(m.accuracy, 0.85, 1e-4);
  EXPECT_NEAR(m.precision, 0.9091, 1e-4);
  EXPECT_NEAR(m.recall, 0.8333, 1e-4);
  EXPECT_NEAR(m.specificity, 0.875, 1e-4);
  EXPECT_NEAR(m.f1, 0.8696, 1e-4);
}

TEST(Metrics, HarmonicMean) { EXPECT_NEAR(f1_score(0.9680, 0.9769), 0.9725, 1e-4); }

TEST(Metrics, PerfectClassifier) {
  const MetricsReport m = metrics({30, 0, 0, 20});
  for (double v : {m.accuracy, m.precision, m.recall, m.specificity, m.f1}) EXPECT_EQ(v, 1.0);
}

TEST(Metrics, UndefinedRatiosReportZero) {
  const MetricsReport m = metrics({0, 0, 0, 10});
  EXPECT_EQ(m.precision, 0.0);
  EXPECT_TRUE(m.precision_undefined);
  EXPECT_TRUE(m.recall_undefined);
  EXPECT_EQ(m.f1, 0.0);
  EXPECT_FALSE(m.specificity_undefined);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_THROW(metrics({0, 0, 0, 0}), DataError);
}

TEST(Bench, ReportFields) {
  const ModelGraph m = build_model(tiny_config());
  const TensorDataset d = testing::synthetic_set(3, 2);
  const LatencyReport r = bench_inference(m, d, 1, 4);
  EXPECT_EQ(r.runs, 4u);
  EXPECT_EQ(r.images, 3u);
  EXPECT_GE(r.min_ms, 0.0);
  EXPECT_GE(r.stddev_ms, 0.0);
  EXPECT_LE(r.min_ms, r.mean_ms);
  EXPECT_LE(r.mean_ms, r.max_ms);
  const LatencyReport one = bench_inference(m, d, 0, 1);
  EXPECT_EQ(one.stddev_ms, 0.0);
  EXPECT_EQ(one.min_ms, one.max_ms);
  EXPECT_THROW(bench_inference(m, d, 0, 0), ParameterError);
  EXPECT_THROW(bench_inference(m, TensorDataset{}, 0, 1), DataError);
}

}  // namespace
}  // namespace densepipe
