#pragma once

// Command-line configuration: one flat key table shared by config files
// (`key = value`, `#` comments) and `--key value` flags.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "densepipe/error.hpp"
#include "densepipe/kv.hpp"
#include "densepipe/model.hpp"
#include "densepipe/train.hpp"

namespace densepipe {

class UnknownKeyError : public ConfigError {
 public:
  explicit UnknownKeyError(const std::string& key) : ConfigError("unknown configuration key '" + key + "'"), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class ConfigFileError : public ConfigError {
 public:
  explicit ConfigFileError(const std::filesystem::path& path)
      : ConfigError("cannot read config file '" + path.string() + "'"), path_(path) {}
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

struct CliConfig {
  TrainConfig train;
  DenseNetConfig model = default_model();
  ModelKind kind = ModelKind::dense;

  std::string manifest;
  std::string checkpoint;
  std::string out = "out";
  std::string pretrained;        // base checkpoint for transfer
  std::string freeze = "none";   // none | backbone
  bool equalize = true;
  double train_fraction = 0.64, val_fraction = 0.16, test_fraction = 0.20;

  std::size_t folds = 5;

  std::size_t synth_n = 1000;
  double class_balance = 0.5;
  std::string variant = "target";

  std::string image;
  std::string layer;
  int target_class = -1;  // -1: explain the predicted class
  double alpha = 0.4;
  std::size_t limit = 16;

  std::size_t warmup = 2;
  std::size_t runs = 5;
  std::size_t threads = 1;

  /// Desk-scale backbone with the B head.
  static DenseNetConfig default_model() {
    DenseNetConfig m;
    m.head = HeadConfig::preset('B');
    return m;
  }

  friend bool operator==(const CliConfig&, const CliConfig&) = default;
};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<void(CliConfig&, const std::string& value)> set;
  std::function<std::string(const CliConfig&)> get;  // empty: not written back
};

namespace detail {

inline std::string fmt_size(std::size_t v) { return std::to_string(v); }

inline ConfigKey size_key(std::string name, std::string help, std::size_t CliConfig::*field) {
  return {name, std::move(help),
          [name, field](CliConfig& c, const std::string& v) { c.*field = kv::to_int<std::size_t>(name, v); },
          [field](const CliConfig& c) { return fmt_size(c.*field); }};
}

inline ConfigKey double_key(std::string name, std::string help, double CliConfig::*field) {
  return {name, std::move(help), [name, field](CliConfig& c, const std::string& v) { c.*field = kv::to_double(name, v); },
          [field](const CliConfig& c) { return kv::format_double(c.*field); }};
}

inline ConfigKey string_key(std::string name, std::string help, std::string CliConfig::*field) {
  return {name, std::move(help), [field](CliConfig& c, const std::string& v) { c.*field = v; },
          [field](const CliConfig& c) { return c.*field; }};
}

inline ConfigKey model_key(std::string name, std::string help) {
  return {name, std::move(help),
          [name](CliConfig& c, const std::string& v) { apply_model_key(c.model, name, v); },
          [name](const CliConfig& c) {
            for (const auto& [k, v] : kv::parse(to_text(c.model))) {
              if (k == name) return v;
            }
            return std::string{};
          }};
}

}  // namespace detail

inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back({"learning_rate", "optimizer step size",
                 [](CliConfig& c, const std::string& v) { c.train.learning_rate = kv::to_double("learning_rate", v); },
                 [](const CliConfig& c) { return kv::format_double(c.train.learning_rate); }});
    k.push_back({"batch_size", "mini-batch size",
                 [](CliConfig& c, const std::string& v) { c.train.batch_size = kv::to_int<std::size_t>("batch_size", v); },
                 [](const CliConfig& c) { return fmt_size(c.train.batch_size); }});
    k.push_back({"epochs", "maximum training epochs",
                 [](CliConfig& c, const std::string& v) { c.train.epochs = kv::to_int<std::size_t>("epochs", v); },
                 [](const CliConfig& c) { return fmt_size(c.train.epochs); }});
    k.push_back({"optimizer", "adam | rmsprop | sgd",
                 [](CliConfig& c, const std::string& v) { c.train.optimizer = parse_optimizer(v); },
                 [](const CliConfig& c) { return to_string(c.train.optimizer); }});
    k.push_back({"dropout_rate", "dropout after each head dense layer",
                 [](CliConfig& c, const std::string& v) {
                   c.train.dropout_rate = kv::to_double("dropout_rate", v);
                   c.model.head.dropout_rate = c.train.dropout_rate;
                 },
                 [](const CliConfig& c) { return kv::format_double(c.train.dropout_rate); }});
    k.push_back({"seed", "seed for splits, initialisation, shuffling and dropout",
                 [](CliConfig& c, const std::string& v) {
                   c.train.seed = kv::to_int<std::uint64_t>("seed", v);
                   c.model.seed = c.train.seed;
                 },
                 [](const CliConfig& c) { return std::to_string(c.train.seed); }});
    k.push_back({"patience", "early-stopping patience in epochs (0 disables)",
                 [](CliConfig& c, const std::string& v) {
                   c.train.early_stop_patience = kv::to_int<std::size_t>("patience", v);
                 },
                 [](const CliConfig& c) { return fmt_size(c.train.early_stop_patience); }});
    k.push_back({"class_weighting", "none | inverse_frequency",
                 [](CliConfig& c, const std::string& v) { c.train.class_weighting = parse_class_weighting(v); },
                 [](const CliConfig& c) { return to_string(c.train.class_weighting); }});
    k.push_back({"model_kind", "dense | plain",
                 [](CliConfig& c, const std::string& v) { c.kind = parse_model_kind(v); },
                 [](const CliConfig& c) { return to_string(c.kind); }});
    k.push_back(model_key("stem_kernel", "stem convolution kernel size"));
    k.push_back(model_key("stem_stride", "stem convolution stride"));
    k.push_back(model_key("stem_channels", "stem output channels (k0)"));
    k.push_back(model_key("stem_pool", "BN, ReLU and 3x3/2 max pool after the stem"));
    k.push_back(model_key("block_sizes", "layers per dense block, comma separated"));
    k.push_back(model_key("growth_rate", "channels added per dense layer (k)"));
    k.push_back(model_key("bottleneck_multiplier", "bottleneck width as a multiple of k"));
    k.push_back(model_key("compression", "transition compression factor"));
    k.push_back({"head", "head preset A | B | C | D",
                 [](CliConfig& c, const std::string& v) {
                   if (v.size() != 1) throw kv::ValueError("head", v, "one of A, B, C, D");
                   c.model.head = HeadConfig::preset(v[0], c.model.head.dropout_rate);
                 },
                 {}});
    k.push_back(model_key("head_widths", "head dense widths, comma separated"));
    k.push_back(model_key("resolution", "input resolution (96, 128, 224 or custom)"));
    k.push_back(model_key("channels", "input channels"));
    k.push_back(string_key("manifest", "dataset manifest CSV", &CliConfig::manifest));
    k.push_back(string_key("checkpoint", "checkpoint path", &CliConfig::checkpoint));
    k.push_back(string_key("out", "output directory", &CliConfig::out));
    k.push_back(string_key("pretrained", "base checkpoint for transfer", &CliConfig::pretrained));
    k.push_back({"freeze", "none | backbone (with pretrained)",
                 [](CliConfig& c, const std::string& v) {
                   if (v != "none" && v != "backbone") throw kv::ValueError("freeze", v, "none or backbone");
                   c.freeze = v;
                 },
                 [](const CliConfig& c) { return c.freeze; }});
    k.push_back({"equalize", "histogram-equalise inputs",
                 [](CliConfig& c, const std::string& v) { c.equalize = kv::to_bool("equalize", v); },
                 [](const CliConfig& c) { return std::string(c.equalize ? "true" : "false"); }});
    k.push_back(double_key("train_fraction", "train share of the stratified split", &CliConfig::train_fraction));
    k.push_back(double_key("val_fraction", "validation share of the stratified split", &CliConfig::val_fraction));
    k.push_back(double_key("test_fraction", "test share of the stratified split", &CliConfig::test_fraction));
    k.push_back(size_key("k", "cross-validation folds", &CliConfig::folds));
    k.push_back(size_key("n", "synthetic images to generate", &CliConfig::synth_n));
    k.push_back(double_key("class_balance", "synthetic fraction of class female", &CliConfig::class_balance));
    k.push_back({"variant", "synthetic variant: target | source",
                 [](CliConfig& c, const std::string& v) {
                   if (v != "target" && v != "source") throw kv::ValueError("variant", v, "target or source");
                   c.variant = v;
                 },
                 [](const CliConfig& c) { return c.variant; }});
    k.push_back(string_key("image", "single image for predict or explain", &CliConfig::image));
    k.push_back(string_key("layer", "Grad-CAM target layer", &CliConfig::layer));
    k.push_back({"class", "Grad-CAM class index (-1: predicted)",
                 [](CliConfig& c, const std::string& v) { c.target_class = kv::to_int<int>("class", v); },
                 [](const CliConfig& c) { return std::to_string(c.target_class); }});
    k.push_back(double_key("alpha", "overlay opacity", &CliConfig::alpha));
    k.push_back(size_key("limit", "images to explain from a manifest", &CliConfig::limit));
    k.push_back(size_key("warmup", "benchmark warm-up passes", &CliConfig::warmup));
    k.push_back(size_key("runs", "benchmark timed passes", &CliConfig::runs));
    k.push_back(size_key("threads", "worker threads (execution is single-threaded)", &CliConfig::threads));
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_config_key(const std::string& name) {
  for (const ConfigKey& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

inline void apply_config_key(CliConfig& c, const std::string& key, const std::string& value) {
  const ConfigKey* k = find_config_key(key);
  if (!k) throw UnknownKeyError(key);
  k->set(c, value);
}

inline void apply_config_text(CliConfig& c, std::string_view text, std::string_view source = "config") {
  for (const auto& [key, value] : kv::parse(text, source)) apply_config_key(c, key, value);
}

/// Precedence, lowest first: built-in defaults, DENSEPIPE_SEED, the file, flags.
inline CliConfig load_config(const std::optional<std::filesystem::path>& file, const kv::Pairs& flags = {},
                             const char* env_seed = std::getenv("DENSEPIPE_SEED")) {
  CliConfig c;
  if (env_seed && *env_seed) apply_config_key(c, "seed", env_seed);
  if (file) {
    std::ifstream in(*file, std::ios::binary);
    if (!in) throw ConfigFileError(*file);
    std::ostringstream ss;
    ss << in.rdbuf();
    apply_config_text(c, ss.str(), file->string());
  }
  for (const auto& [key, value] : flags) apply_config_key(c, key, value);
  return c;
}

inline std::string config_text(const CliConfig& c) {
  std::string s;
  for (const ConfigKey& k : config_keys()) {
    if (k.get) s += k.name + " = " + k.get(c) + "\n";
  }
  return s;
}

inline void write_config(const CliConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config file '" + path.string() + "'");
  out << config_text(c);
  if (!out) throw IoError("failed writing config file '" + path.string() + "'");
}

}  // namespace densepipe
