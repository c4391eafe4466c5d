#pragma once

// Training loop with class-weighted loss, early stopping and restore-best,
// plus the transfer workflow (backbone copy, fresh head, freezing).

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "densepipe/checkpoint.hpp"
#include "densepipe/dataset.hpp"
#include "densepipe/error.hpp"
#include "densepipe/model.hpp"
#include "densepipe/ops.hpp"
#include "densepipe/optim.hpp"

namespace densepipe {

enum class ClassWeighting { none, inverse_frequency };

inline std::string to_string(ClassWeighting w) { return w == ClassWeighting::none ? "none" : "inverse_frequency"; }

inline ClassWeighting parse_class_weighting(std::string_view s) {
  if (s == "none") return ClassWeighting::none;
  if (s == "inverse_frequency") return ClassWeighting::inverse_frequency;
  throw ConfigError("unknown class weighting '" + std::string(s) + "' (expected none or inverse_frequency)");
}

/// Defaults: lr 1e-4, batch 16, 50 epochs, Adam, dropout 0.5. `dropout_rate`
/// is applied when a model is built from this config (see the CLI); train()
/// uses whatever rates the model already carries.
struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 50;
  OptimizerKind optimizer = OptimizerKind::adam;
  double dropout_rate = 0.5;
  std::uint64_t seed = 0;
  std::size_t early_stop_patience = 5;  // 0 disables early stopping
  ClassWeighting class_weighting = ClassWeighting::inverse_frequency;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochRecord {
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool stopped_early = false;

  std::size_t size() const noexcept { return epochs.size(); }
};

/// Index of the first strict minimum of validation loss.
inline std::size_t best_epoch_of(const std::vector<EpochRecord>& records) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].val_loss < records[best].val_loss) best = i;
  }
  return best;
}

/// True once (current epoch - best epoch) >= patience; only strictly lower
/// validation losses refresh the best epoch. Patience 0 never stops.
inline bool should_stop(const TrainHistory& history, std::size_t patience) {
  if (patience == 0 || history.epochs.empty()) return false;
  const std::size_t current = history.epochs.size() - 1;
  return current - best_epoch_of(history.epochs) >= patience;
}

/// w_c = N_total / (C * N_c).
inline std::vector<double> inverse_frequency_weights(const std::vector<std::size_t>& counts) {
  if (counts.empty()) throw DataError("no classes to weight");
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  std::vector<double> w;
  w.reserve(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw DataError("class " + std::to_string(c) + " has no samples");
    w.push_back(total / (static_cast<double>(counts.size()) * static_cast<double>(counts[c])));
  }
  return w;
}

inline std::vector<double> compute_class_weights(const DatasetManifest& m) {
  return inverse_frequency_weights(m.class_counts());
}

inline std::vector<std::size_t> label_counts(std::span<const int> labels, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw DataError("label outside the class range");
    ++counts[static_cast<std::size_t>(y)];
  }
  return counts;
}

// ---------------------------------------------------------------------------

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<int> predictions;
  Tensor probabilities;  // (N, classes)
};

inline int argmax_row(const double* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j) {
    if (row[j] > row[best]) best = j;
  }
  return static_cast<int>(best);
}

/// Eval-mode pass over the dataset in fixed-size batches; loss is the
/// sample-weighted mean of per-batch weighted losses.
inline EvalResult evaluate(const ModelGraph& model, const TensorDataset& data, std::span<const double> class_weights,
                           std::size_t batch_size) {
  if (data.size() == 0) throw DataError("cannot evaluate an empty dataset");
  const std::size_t classes = model.config.num_classes;
  EvalResult r;
  r.probabilities = Tensor({data.size(), classes});
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, data.size());
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const ForwardPass pass = infer(model, data.batch(idx));
    const Tensor& logits = pass.logits();
    const std::vector<int> labels(data.labels.begin() + static_cast<std::ptrdiff_t>(start),
                                  data.labels.begin() + static_cast<std::ptrdiff_t>(end));
    const LossResult lr = softmax_cross_entropy(logits, labels, class_weights);
    r.loss += lr.loss * static_cast<double>(end - start);
    const Tensor p = softmax(logits);
    std::copy(p.values().begin(), p.values().end(), r.probabilities.data() + start * classes);
    for (std::size_t i = 0; i < end - start; ++i) {
      const int pred = argmax_row(logits.data() + i * classes, classes);
      r.predictions.push_back(pred);
      correct += pred == labels[i];
    }
  }
  r.loss /= static_cast<double>(data.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

struct TrainHooks {
  /// Replaces the measured validation loss of an epoch (fault injection).
  std::function<double(std::size_t epoch, double measured)> val_loss_override;
  std::function<void(std::size_t epoch, const EpochRecord&)> on_epoch;
};

struct TrainResult {
  TrainHistory history;
  Checkpoint best;  // weights of the best-validation-loss epoch
  OptimizerState optimizer;
  std::vector<double> class_weights;
};

/// Mini-batch training. Each epoch reshuffles with the seeded stream, keeps a
/// short final batch, and evaluates the full validation set in eval mode.
/// On return `model` holds the best epoch's weights.
inline TrainResult train(ModelGraph& model, const TensorDataset& train_set, const TensorDataset& val_set,
                         const TrainConfig& config, const TrainHooks& hooks = {}) {
  config.validate();
  if (train_set.size() == 0 || val_set.size() == 0) throw DataError("training and validation sets must be non-empty");
  const std::size_t classes = model.config.num_classes;
  TrainResult result;
  result.optimizer.kind = config.optimizer;
  result.class_weights = config.class_weighting == ClassWeighting::inverse_frequency
                             ? inverse_frequency_weights(label_counts(train_set.labels, classes))
                             : std::vector<double>(classes, 1.0);
  Rng shuffle_rng = Rng::stream(config.seed, "shuffle");
  Rng dropout_rng = Rng::stream(config.seed, "dropout");
  std::vector<std::size_t> order(train_set.size());
  double best_loss = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(start + config.batch_size, order.size());
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (std::size_t i : idx) labels.push_back(train_set.labels[i]);
      const ForwardPass pass = forward(model, train_set.batch(idx), Mode::train, dropout_rng);
      const LossResult loss = softmax_cross_entropy(pass.logits(), labels, result.class_weights);
      if (!std::isfinite(loss.loss)) {
        throw TrainingDivergedError("non-finite training loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                    std::to_string(start / config.batch_size + 1));
      }
      loss_sum += loss.loss * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        correct += argmax_row(pass.logits().data() + i * classes, classes) == labels[i];
      }
      const BackwardPass grads = backward(model, pass, loss.grad);
      optimizer_step(model.graph.params, grads.param_grads, result.optimizer, config.learning_rate, model.frozen);
    }
    EpochRecord rec;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_set.size());
    const EvalResult val = evaluate(model, val_set, result.class_weights, config.batch_size);
    rec.val_loss = hooks.val_loss_override ? hooks.val_loss_override(epoch, val.loss) : val.loss;
    rec.val_accuracy = val.accuracy;
    if (!std::isfinite(rec.val_loss)) {
      throw TrainingDivergedError("non-finite validation loss at epoch " + std::to_string(epoch + 1));
    }
    result.history.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(epoch, rec);
    if (rec.val_loss < best_loss) {
      best_loss = rec.val_loss;
      result.history.best_epoch = epoch;
      result.best = make_checkpoint(model, {config.seed, epoch, rec.val_loss});
    }
    if (should_stop(result.history, config.early_stop_patience)) {
      result.history.stopped_early = epoch + 1 < config.epochs;
      break;
    }
  }
  load_weights(model, result.best);
  return result;
}

// ---------------------------------------------------------------------------
// Transfer.

struct FreezePolicy {
  enum class Mode { none, backbone, names };
  Mode mode = Mode::none;
  std::vector<std::string> names;

  static FreezePolicy none() { return {}; }
  static FreezePolicy backbone() { return {Mode::backbone, {}}; }
  static FreezePolicy explicit_names(std::vector<std::string> n) { return {Mode::names, std::move(n)}; }
};

inline void apply_freeze(ModelGraph& m, const FreezePolicy& policy) {
  m.frozen.clear();
  switch (policy.mode) {
    case FreezePolicy::Mode::none:
      break;
    case FreezePolicy::Mode::backbone:
      for (const std::string& name : m.backbone_params()) m.frozen.insert(name);
      break;
    case FreezePolicy::Mode::names:
      for (const std::string& name : policy.names) {
        if (!m.graph.params.contains(name)) throw ConfigError("cannot freeze unknown parameter '" + name + "'");
        m.frozen.insert(name);
      }
      break;
  }
}

/// Builds a model with the base checkpoint's backbone and a freshly
/// initialised head, copying backbone parameters and normalization statistics.
inline ModelGraph transfer(const Checkpoint& base, const HeadConfig& new_head, std::size_t num_classes,
                           const FreezePolicy& freeze, std::uint64_t seed) {
  for (std::size_t w : new_head.dense_widths) {
    if (w < 1) throw ConfigError("head widths must be positive");
  }
  const ParsedCheckpointConfig parsed = parse_checkpoint_config(base.config_text);
  DenseNetConfig cfg = parsed.config;
  cfg.head = new_head;
  cfg.num_classes = num_classes;
  cfg.seed = seed;
  ModelGraph m = build_model(cfg, parsed.kind);
  const auto copy = [&](std::map<std::string, Tensor>& table, bool params) {
    for (auto& [name, t] : table) {
      if (params && m.is_head_param(name)) continue;
      const Tensor* src = base.find(name);
      if (!src) throw CheckpointMismatchError("base checkpoint lacks backbone tensor '" + name + "'");
      if (src->shape() != t.shape()) {
        throw CheckpointMismatchError("backbone tensor '" + name + "' has shape " + shape_string(src->shape()) +
                                      ", expected " + shape_string(t.shape()));
      }
      t = *src;
    }
  };
  copy(m.graph.params, true);
  copy(m.graph.buffers, false);
  apply_freeze(m, freeze);
  return m;
}

}  // namespace densepipe
