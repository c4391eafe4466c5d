#pragma once

// Run reports: history.csv, metrics.csv, confusion.txt, folds.csv,
// latency.csv and a human-readable report.txt.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "densepipe/error.hpp"
#include "densepipe/metrics.hpp"
#include "densepipe/train.hpp"

namespace densepipe {

struct FoldRow {
  std::size_t fold = 0;
  std::size_t train_size = 0, val_size = 0;
  std::size_t epochs = 0, best_epoch = 0;
  double val_loss = 0.0;
  ConfusionMatrix confusion;
  MetricsReport metrics;
};

struct RunReport {
  std::string command;
  std::vector<std::string> classes{"female", "male"};
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  std::optional<ConfusionMatrix> confusion;
  std::optional<MetricsReport> metrics;
  std::vector<FoldRow> folds;
  std::optional<LatencyReport> latency;
  double seconds = 0.0;
  std::string config_text;
};

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

namespace detail {

inline std::ofstream open_report(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  return out;
}

inline void close_report(std::ofstream& out, const std::filesystem::path& path) {
  out.close();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string metric_values(const MetricsReport& m) {
  return fixed6(m.accuracy) + "," + fixed6(m.precision) + "," + fixed6(m.recall) + "," + fixed6(m.specificity) + "," +
         fixed6(m.f1);
}

inline std::string counts(const ConfusionMatrix& cm) {
  return std::to_string(cm.tp) + "," + std::to_string(cm.fn) + "," + std::to_string(cm.fp) + "," + std::to_string(cm.tn);
}

}  // namespace detail

inline constexpr const char* kMetricsHeader = "accuracy,precision,recall,specificity,f1,tp,fn,fp,tn";

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string s = "epoch,train_loss,train_acc,val_loss,val_acc\n";
  for (std::size_t i = 0; i < history.size(); ++i) {
    const EpochRecord& r = history[i];
    s += std::to_string(i + 1) + "," + fixed6(r.train_loss) + "," + fixed6(r.train_accuracy) + "," +
         fixed6(r.val_loss) + "," + fixed6(r.val_accuracy) + "\n";
  }
  return s;
}

inline std::string metrics_csv(const MetricsReport& m, const ConfusionMatrix& cm) {
  return std::string(kMetricsHeader) + "\n" + detail::metric_values(m) + "," + detail::counts(cm) + "\n";
}

/// Rows are the actual class, columns the predicted class, positive class first.
inline std::string confusion_text(const ConfusionMatrix& cm, const std::vector<std::string>& classes) {
  const std::string pos = classes.size() > 0 ? classes[0] : "positive";
  const std::string neg = classes.size() > 1 ? classes[1] : "negative";
  std::size_t w = 8;
  for (const std::string& c : {pos, neg}) w = std::max(w, c.size() + 9);
  const auto cell = [w](const std::string& s) { return s + std::string(w - std::min(w - 1, s.size()), ' '); };
  std::string s;
  s += cell("") + cell("pred " + pos) + "pred " + neg + "\n";
  s += cell("actual " + pos) + cell(std::to_string(cm.tp)) + std::to_string(cm.fn) + "\n";
  s += cell("actual " + neg) + cell(std::to_string(cm.fp)) + std::to_string(cm.tn) + "\n";
  return s;
}

inline std::string folds_csv(const std::vector<FoldRow>& folds) {
  std::string s = "fold,train_size,val_size,epochs,best_epoch,val_loss," + std::string(kMetricsHeader) + "\n";
  for (const FoldRow& f : folds) {
    s += std::to_string(f.fold) + "," + std::to_string(f.train_size) + "," + std::to_string(f.val_size) + "," +
         std::to_string(f.epochs) + "," + std::to_string(f.best_epoch + 1) + "," + fixed6(f.val_loss) + "," +
         detail::metric_values(f.metrics) + "," + detail::counts(f.confusion) + "\n";
  }
  if (folds.empty()) return s;
  // Mean and sample standard deviation of the metric columns.
  const auto column = [&](auto get) {
    double mean = 0.0;
    for (const FoldRow& f : folds) mean += get(f);
    mean /= static_cast<double>(folds.size());
    double ss = 0.0;
    for (const FoldRow& f : folds) ss += (get(f) - mean) * (get(f) - mean);
    const double sd = folds.size() > 1 ? std::sqrt(ss / static_cast<double>(folds.size() - 1)) : 0.0;
    return std::pair{mean, sd};
  };
  const std::pair<double, double> cols[] = {
      column([](const FoldRow& f) { return f.val_loss; }),
      column([](const FoldRow& f) { return f.metrics.accuracy; }),
      column([](const FoldRow& f) { return f.metrics.precision; }),
      column([](const FoldRow& f) { return f.metrics.recall; }),
      column([](const FoldRow& f) { return f.metrics.specificity; }),
      column([](const FoldRow& f) { return f.metrics.f1; }),
  };
  for (int which = 0; which < 2; ++which) {
    s += which == 0 ? "mean,,,,," : "std,,,,,";
    for (std::size_t i = 0; i < std::size(cols); ++i) {
      s += fixed6(which == 0 ? cols[i].first : cols[i].second);
      s += i + 1 < std::size(cols) ? "," : ",,,,\n";
    }
  }
  return s;
}

inline std::string latency_csv(const LatencyReport& l) {
  return "images,runs,mean_ms,stddev_ms,min_ms,max_ms\n" + std::to_string(l.images) + "," + std::to_string(l.runs) +
         "," + fixed6(l.mean_ms) + "," + fixed6(l.stddev_ms) + "," + fixed6(l.min_ms) + "," + fixed6(l.max_ms) + "\n";
}

inline std::string summary_text(const RunReport& r) {
  std::string s = "densepipe " + r.command + "\n";
  if (!r.history.empty()) {
    s += "epochs trained: " + std::to_string(r.history.size()) + (r.stopped_early ? " (stopped early)" : "") + "\n";
    s += "best epoch: " + std::to_string(r.best_epoch + 1) + " (val_loss " + fixed6(r.history[r.best_epoch].val_loss) +
         ")\n";
  }
  if (r.metrics) {
    const MetricsReport& m = *r.metrics;
    s += "accuracy:    " + fixed6(m.accuracy) + "\n";
    s += "precision:   " + fixed6(m.precision) + (m.precision_undefined ? " (undefined)" : "") + "\n";
    s += "recall:      " + fixed6(m.recall) + (m.recall_undefined ? " (undefined)" : "") + "\n";
    s += "specificity: " + fixed6(m.specificity) + (m.specificity_undefined ? " (undefined)" : "") + "\n";
    s += "f1:          " + fixed6(m.f1) + (m.f1_undefined ? " (undefined)" : "") + "\n";
  }
  if (r.confusion) s += "\n" + confusion_text(*r.confusion, r.classes);
  if (!r.folds.empty()) s += "\nfolds:\n" + folds_csv(r.folds);
  if (r.latency) {
    s += "latency per image: " + fixed6(r.latency->mean_ms) + " ms (sd " + fixed6(r.latency->stddev_ms) + ", min " +
         fixed6(r.latency->min_ms) + ", max " + fixed6(r.latency->max_ms) + ") over " + std::to_string(r.latency->runs) +
         " runs of " + std::to_string(r.latency->images) + " images\n";
  }
  s += "elapsed seconds: " + fixed6(r.seconds) + "\n";
  if (!r.config_text.empty()) s += "\nconfig:\n" + r.config_text;
  return s;
}

/// Writes whichever sections the report carries plus report.txt.
inline void write_report(const RunReport& r, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError("cannot create report directory '" + out_dir.string() + "'");
  }
  const auto emit = [&](const char* name, const std::string& text) {
    const auto path = out_dir / name;
    std::ofstream out = detail::open_report(path);
    out << text;
    detail::close_report(out, path);
  };
  if (!r.history.empty()) emit("history.csv", history_csv(r.history));
  if (r.metrics && r.confusion) emit("metrics.csv", metrics_csv(*r.metrics, *r.confusion));
  if (r.confusion) emit("confusion.txt", confusion_text(*r.confusion, r.classes));
  if (!r.folds.empty()) emit("folds.csv", folds_csv(r.folds));
  if (r.latency) emit("latency.csv", latency_csv(*r.latency));
  emit("report.txt", summary_text(r));
}

}  // namespace densepipe
