#pragma once

// `densepipe <subcommand> [--config FILE] [--key value ...]`
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "densepipe/checkpoint.hpp"
#include "densepipe/config.hpp"
#include "densepipe/dataset.hpp"
#include "densepipe/error.hpp"
#include "densepipe/gradcam.hpp"
#include "densepipe/metrics.hpp"
#include "densepipe/model.hpp"
#include "densepipe/report.hpp"
#include "densepipe/synth.hpp"
#include "densepipe/train.hpp"

namespace densepipe {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public Error {
 public:
  using Error::Error;
};

namespace cli {

namespace fs = std::filesystem;

struct Io {
  std::ostream& out;
  std::ostream& err;
};

inline const std::string& require(const std::string& value, const char* key) {
  if (value.empty()) throw UsageError(std::string("missing required --") + key);
  return value;
}

inline double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline PreprocessOptions preprocess_options(const CliConfig& c) {
  return {c.model.input_resolution, c.model.input_channels, c.equalize};
}

inline PreprocessOptions preprocess_options(const ModelGraph& m, const CheckpointMeta& meta) {
  return {m.config.input_resolution, m.config.input_channels, meta.equalize};
}

struct LoadedModel {
  ModelGraph model;
  CheckpointMeta meta;
};

inline LoadedModel load_model(const CliConfig& c) {
  const Checkpoint ck = read_checkpoint(require(c.checkpoint, "checkpoint"));
  const ParsedCheckpointConfig p = parse_checkpoint_config(ck.config_text);
  LoadedModel lm{build_model(p.config, p.kind), p.meta};
  load_weights(lm.model, ck);
  if (lm.meta.classes.empty()) {
    for (std::size_t i = 0; i < lm.model.config.num_classes; ++i) lm.meta.classes.push_back("class" + std::to_string(i));
  }
  return lm;
}

inline ModelGraph make_model(const CliConfig& c, std::size_t num_classes, std::uint64_t seed) {
  if (!c.pretrained.empty()) {
    const FreezePolicy freeze = c.freeze == "backbone" ? FreezePolicy::backbone() : FreezePolicy::none();
    ModelGraph m = transfer(read_checkpoint(c.pretrained), c.model.head, num_classes, freeze, seed);
    if (m.config.input_resolution != c.model.input_resolution || m.config.input_channels != c.model.input_channels) {
      throw ConfigError("pretrained backbone expects resolution " + std::to_string(m.config.input_resolution) +
                        " and " + std::to_string(m.config.input_channels) + " channels");
    }
    return m;
  }
  if (c.freeze != "none") throw ConfigError("freeze requires a pretrained checkpoint");
  DenseNetConfig cfg = c.model;
  cfg.num_classes = num_classes;
  cfg.seed = seed;
  return build_model(cfg, c.kind);
}

struct Assessment {
  ConfusionMatrix confusion;
  MetricsReport metrics;
};

/// Test-set metrics; the positive class is index 0.
inline Assessment assess(const ModelGraph& m, const TensorDataset& data) {
  if (m.config.num_classes != 2) throw DataError("metrics need a two-class model");
  const std::vector<int> predicted = predict_labels(m, data);
  Assessment a;
  a.confusion = confusion(data.labels, predicted, 0);
  a.metrics = metrics(a.confusion);
  return a;
}

inline void print_metrics(std::ostream& out, const MetricsReport& m) {
  out << "accuracy " << fixed6(m.accuracy) << "  precision " << fixed6(m.precision) << "  recall " << fixed6(m.recall)
      << "  specificity " << fixed6(m.specificity) << "  f1 " << fixed6(m.f1) << "\n";
}

// ---------------------------------------------------------------------------

inline int run_synth(const CliConfig& c, Io io) {
  require(c.out, "out");
  SynthOptions opt;
  opt.n = c.synth_n;
  opt.resolution = c.model.input_resolution;
  opt.class_balance = c.class_balance;
  opt.seed = c.train.seed;
  opt.variant = c.variant == "source" ? SynthVariant::source : SynthVariant::target;
  const DatasetManifest m = synth_generate(opt, c.out);
  io.out << "wrote " << m.size() << " images and " << (fs::path(c.out) / "manifest.csv").string() << "\n";
  return kExitOk;
}

inline int run_train(const CliConfig& c, Io io) {
  const auto t0 = std::chrono::steady_clock::now();
  const DatasetManifest all = read_manifest(require(c.manifest, "manifest"));
  const SplitResult split = stratified_split(all, {c.train_fraction, c.val_fraction, c.test_fraction, c.train.seed});
  const fs::path out(c.out);
  fs::create_directories(out);
  write_manifest(split.train, out / "train.csv");
  write_manifest(split.validation, out / "val.csv");
  write_manifest(split.test, out / "test.csv");
  write_config(c, out / "config.txt");

  const PreprocessOptions pre = preprocess_options(c);
  const TensorDataset train_set = load_dataset(split.train, pre, all.classes());
  const TensorDataset val_set = load_dataset(split.validation, pre, all.classes());
  const TensorDataset test_set = load_dataset(split.test, pre, all.classes());
  ModelGraph model = make_model(c, all.classes().size(), c.train.seed);

  TrainHooks hooks;
  hooks.on_epoch = [&io](std::size_t epoch, const EpochRecord& r) {
    io.out << "epoch " << epoch + 1 << "  train_loss " << fixed6(r.train_loss) << "  train_acc "
           << fixed6(r.train_accuracy) << "  val_loss " << fixed6(r.val_loss) << "  val_acc " << fixed6(r.val_accuracy)
           << "\n";
  };
  const TrainResult result = train(model, train_set, val_set, c.train, hooks);
  const fs::path ckpt = c.checkpoint.empty() ? out / "model.ckpt" : fs::path(c.checkpoint);
  CheckpointMeta meta{c.train.seed, result.history.best_epoch, result.history.epochs[result.history.best_epoch].val_loss,
                      all.classes(), c.equalize};
  save_checkpoint(model, ckpt, meta, &result.optimizer);

  const Assessment a = assess(model, test_set);
  RunReport report;
  report.command = "train";
  report.classes = all.classes();
  report.history = result.history.epochs;
  report.best_epoch = result.history.best_epoch;
  report.stopped_early = result.history.stopped_early;
  report.confusion = a.confusion;
  report.metrics = a.metrics;
  report.seconds = elapsed_since(t0);
  report.config_text = config_text(c);
  write_report(report, out);
  io.out << "checkpoint " << ckpt.string() << "\ntest ";
  print_metrics(io.out, a.metrics);
  return kExitOk;
}

inline int run_crossval(const CliConfig& c, Io io) {
  const auto t0 = std::chrono::steady_clock::now();
  const DatasetManifest all = read_manifest(require(c.manifest, "manifest"));
  const std::vector<Fold> folds = kfold(all, c.folds, c.train.seed);
  const fs::path out(c.out);
  fs::create_directories(out);
  write_config(c, out / "config.txt");
  const PreprocessOptions pre = preprocess_options(c);
  RunReport report;
  report.command = "crossval";
  report.classes = all.classes();
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const TensorDataset train_set = load_dataset(folds[f].train, pre, all.classes());
    const TensorDataset val_set = load_dataset(folds[f].validation, pre, all.classes());
    TrainConfig tc = c.train;
    tc.seed = c.train.seed + f;
    ModelGraph model = make_model(c, all.classes().size(), tc.seed);
    const TrainResult result = train(model, train_set, val_set, tc);
    const Assessment a = assess(model, val_set);
    FoldRow row{f + 1, train_set.size(), val_set.size(), result.history.size(), result.history.best_epoch,
                result.history.epochs[result.history.best_epoch].val_loss, a.confusion, a.metrics};
    report.folds.push_back(row);
    RunReport fold_report;
    fold_report.command = "crossval fold " + std::to_string(f + 1);
    fold_report.classes = all.classes();
    fold_report.history = result.history.epochs;
    fold_report.best_epoch = result.history.best_epoch;
    fold_report.stopped_early = result.history.stopped_early;
    fold_report.confusion = a.confusion;
    fold_report.metrics = a.metrics;
    write_report(fold_report, out / ("fold" + std::to_string(f + 1)));
    io.out << "fold " << f + 1 << " train " << row.train_size << " val " << row.val_size << "  ";
    print_metrics(io.out, a.metrics);
  }
  report.seconds = elapsed_since(t0);
  report.config_text = config_text(c);
  write_report(report, out);
  return kExitOk;
}

inline int run_eval(const CliConfig& c, Io io) {
  const auto t0 = std::chrono::steady_clock::now();
  const LoadedModel lm = load_model(c);
  const DatasetManifest m = read_manifest(require(c.manifest, "manifest"));
  const TensorDataset data = load_dataset(m, preprocess_options(lm.model, lm.meta), lm.meta.classes);
  const Assessment a = assess(lm.model, data);
  RunReport report;
  report.command = "eval";
  report.classes = lm.meta.classes;
  report.confusion = a.confusion;
  report.metrics = a.metrics;
  report.seconds = elapsed_since(t0);
  report.config_text = config_text(c);
  write_report(report, c.out);
  print_metrics(io.out, a.metrics);
  return kExitOk;
}

/// Images named by --image, or the entries of --manifest.
inline std::vector<ManifestEntry> inputs(const CliConfig& c, fs::path& base) {
  if (!c.image.empty()) {
    base.clear();
    return {ManifestEntry{c.image, "", std::nullopt}};
  }
  const DatasetManifest m = read_manifest(require(c.manifest, "manifest or --image"));
  base = m.base_dir();
  return m.entries();
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

inline int run_predict(const CliConfig& c, Io io) {
  const LoadedModel lm = load_model(c);
  fs::path base;
  const std::vector<ManifestEntry> entries = inputs(c, base);
  const PreprocessOptions pre = preprocess_options(lm.model, lm.meta);
  io.out << "path,predicted";
  for (const std::string& name : lm.meta.classes) io.out << ",p_" << name;
  io.out << "\n";
  for (const ManifestEntry& e : entries) {
    const ImageGray img = preprocess(load_image(resolve(base, e.path)), pre);
    const Tensor x = to_tensor(img, pre.channels);
    const Tensor p = softmax(infer(lm.model, x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)})).logits());
    const int cls = argmax_row(p.data(), p.size());
    io.out << e.path << "," << lm.meta.classes[static_cast<std::size_t>(cls)];
    for (double v : p.values()) io.out << "," << fixed6(v);
    io.out << "\n";
  }
  return kExitOk;
}

inline int run_explain(const CliConfig& c, Io io) {
  const LoadedModel lm = load_model(c);
  fs::path base;
  std::vector<ManifestEntry> entries = inputs(c, base);
  if (entries.size() > c.limit) entries.resize(c.limit);
  const PreprocessOptions pre = preprocess_options(lm.model, lm.meta);
  const fs::path out(c.out);
  fs::create_directories(out);
  io.out << "path,class,overlay,mass_in_cue\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const ManifestEntry& e = entries[i];
    std::optional<CueBox> cue = e.cue;
    const ImageGray img = preprocess(load_image(resolve(base, e.path)), pre, &cue);
    const Tensor x = to_tensor(img, pre.channels);
    std::size_t cls = 0;
    if (c.target_class >= 0) {
      cls = static_cast<std::size_t>(c.target_class);
    } else {
      const Tensor logits = infer(lm.model, x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)})).logits();
      cls = static_cast<std::size_t>(argmax_row(logits.data(), logits.size()));
    }
    const Heatmap h = upsample_bilinear(gradcam(lm.model, x, cls, c.layer), img.height, img.width);
    const ImageRgb panel = side_by_side(render_heatmap(h), colorize_overlay(h, img, c.alpha));
    char name[40];
    std::snprintf(name, sizeof name, "explain_%04zu.png", i);
    save_png(panel, out / name);
    io.out << e.path << "," << lm.meta.classes.at(cls) << "," << (out / name).string() << ","
           << (cue ? fixed6(mass_inside(h, *cue)) : std::string{}) << "\n";
  }
  return kExitOk;
}

inline int run_bench(const CliConfig& c, Io io) {
  const auto t0 = std::chrono::steady_clock::now();
  const LoadedModel lm = load_model(c);
  const DatasetManifest m = read_manifest(require(c.manifest, "manifest"));
  const TensorDataset data = load_dataset(m, preprocess_options(lm.model, lm.meta), lm.meta.classes);
  RunReport report;
  report.command = "bench";
  report.classes = lm.meta.classes;
  report.latency = bench_inference(lm.model, data, c.warmup, c.runs);
  report.seconds = elapsed_since(t0);
  report.config_text = config_text(c);
  write_report(report, c.out);
  io.out << "mean " << fixed6(report.latency->mean_ms) << " ms/image over " << report.latency->runs << " runs\n";
  return kExitOk;
}

struct Command {
  const char* name;
  const char* help;
  int (*run)(const CliConfig&, Io);
};

inline const std::vector<Command>& commands() {
  static const std::vector<Command> list = {
      {"synth", "generate the synthetic dataset (--out, --n, --seed)", run_synth},
      {"train", "split, train, checkpoint and report (--manifest)", run_train},
      {"crossval", "stratified k-fold training (--manifest, --k)", run_crossval},
      {"eval", "metrics of a checkpoint on a manifest (--checkpoint, --manifest)", run_eval},
      {"predict", "class probabilities per image (--checkpoint, --image or --manifest)", run_predict},
      {"explain", "Grad-CAM overlays (--checkpoint, --image or --manifest)", run_explain},
      {"bench", "single-image inference latency (--checkpoint, --manifest)", run_bench},
  };
  return list;
}

}  // namespace cli

/// Parses `args` (without the program name) and runs one subcommand.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"densepipe: DenseNet transfer-learning pipeline"};
  app.require_subcommand(1);
  std::string config_file;
  kv::Pairs flags;
  const cli::Command* chosen = nullptr;
  for (const cli::Command& cmd : cli::commands()) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config_file, "config file of `key = value` lines");
    for (const ConfigKey& key : config_keys()) {
      const std::string name = key.name;
      sub->add_option_function<std::string>(
             "--" + name, [&flags, name](const std::string& v) { flags.emplace_back(name, v); }, key.help)
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
    sub->callback([&chosen, &cmd] { chosen = &cmd; });
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "densepipe: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }
  if (!chosen) {
    err << app.help();
    return kExitUsage;
  }

  try {
    const std::optional<std::filesystem::path> file =
        config_file.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_file);
    const CliConfig config = load_config(file, flags);
    config.train.validate();
    return chosen->run(config, {out, err});
  } catch (const UsageError& e) {
    err << "densepipe " << chosen->name << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "densepipe " << chosen->name << ": configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParameterError& e) {
    err << "densepipe " << chosen->name << ": invalid parameter: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "densepipe " << chosen->name << ": " << e.what() << "\n";
    return kExitFailure;
  } catch (...) {
    err << "densepipe " << chosen->name << ": unknown failure\n";
    return kExitFailure;
  }
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, out, err);
}

}  // namespace densepipe
