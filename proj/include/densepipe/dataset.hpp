#pragma once

// Dataset manifests (CSV), stratified splits, stratified k-fold partitions and
// loading manifests into preprocessed tensors.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "densepipe/error.hpp"
#include "densepipe/image.hpp"
#include "densepipe/kv.hpp"
#include "densepipe/tensor.hpp"

namespace densepipe {

struct CueBox {
  int x = 0, y = 0, w = 0, h = 0;

  bool contains(double px, double py) const { return px >= x && px < x + w && py >= y && py < y + h; }
  friend bool operator==(const CueBox&, const CueBox&) = default;
};

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory (or absolute)
  std::string label;
  std::optional<CueBox> cue;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// Sorted unique labels; "female" is moved to index 0 when present so it is
/// the positive class.
inline std::vector<std::string> class_table(const std::vector<ManifestEntry>& entries) {
  std::set<std::string> unique;
  for (const auto& e : entries) unique.insert(e.label);
  std::vector<std::string> classes(unique.begin(), unique.end());
  if (const auto it = std::find(classes.begin(), classes.end(), "female"); it != classes.end()) {
    std::rotate(classes.begin(), it, it + 1);
  }
  return classes;
}

class DatasetManifest {
 public:
  DatasetManifest() = default;
  DatasetManifest(std::vector<ManifestEntry> entries, std::filesystem::path base_dir = {})
      : base_dir_(std::move(base_dir)), entries_(std::move(entries)) {
    classes_ = class_table(entries_);
    validate();
  }

  /// Subset sharing this manifest's class table and base directory.
  DatasetManifest subset(const std::vector<std::size_t>& indices) const {
    DatasetManifest m;
    m.base_dir_ = base_dir_;
    m.classes_ = classes_;
    m.entries_.reserve(indices.size());
    for (std::size_t i : indices) m.entries_.push_back(entries_.at(i));
    return m;
  }

  const std::vector<ManifestEntry>& entries() const noexcept { return entries_; }
  const std::vector<std::string>& classes() const noexcept { return classes_; }
  const std::filesystem::path& base_dir() const noexcept { return base_dir_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  int class_index(const std::string& label) const {
    const auto it = std::find(classes_.begin(), classes_.end(), label);
    if (it == classes_.end()) throw DataError("label '" + label + "' is not in the class table");
    return static_cast<int>(it - classes_.begin());
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(class_index(e.label));
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes_.size(), 0);
    for (const auto& e : entries_) ++counts[static_cast<std::size_t>(class_index(e.label))];
    return counts;
  }

  std::filesystem::path resolve(const ManifestEntry& e) const {
    const std::filesystem::path p(e.path);
    return p.is_absolute() ? p : base_dir_ / p;
  }

 private:
  void validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries_) {
      if (e.label.empty()) throw DataError("manifest entry '" + e.path + "' has an empty label");
      if (!seen.insert(e.path).second) throw DataError("duplicate manifest path '" + e.path + "'");
    }
  }

  std::filesystem::path base_dir_;
  std::vector<ManifestEntry> entries_;
  std::vector<std::string> classes_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// CSV with header `path,label[,cue_x,cue_y,cue_w,cue_h]`; paths relative to
/// the manifest's directory.
inline DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir,
                                      const std::string& source = "manifest") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": empty manifest");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
  const auto header = detail::split_csv_line(line);
  const bool with_cue = header.size() == 6;
  if ((header.size() != 2 && header.size() != 6) || header[0] != "path" || header[1] != "label" ||
      (with_cue && (header[2] != "cue_x" || header[3] != "cue_y" || header[4] != "cue_w" || header[5] != "cue_h"))) {
    throw DataError(source + ": header must be `path,label[,cue_x,cue_y,cue_w,cue_h]`");
  }
  std::vector<ManifestEntry> entries;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != header.size()) {
      throw DataError(source + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) + " fields");
    }
    ManifestEntry e{f[0], f[1], std::nullopt};
    if (with_cue && !(f[2].empty() && f[3].empty() && f[4].empty() && f[5].empty())) {
      try {
        e.cue = CueBox{kv::to_int<int>("cue_x", f[2]), kv::to_int<int>("cue_y", f[3]), kv::to_int<int>("cue_w", f[4]),
                       kv::to_int<int>("cue_h", f[5])};
      } catch (const ConfigError& err) {
        throw DataError(source + ":" + std::to_string(line_no) + ": " + err.what());
      }
    }
    if (e.path.empty()) throw DataError(source + ":" + std::to_string(line_no) + ": empty path");
    entries.push_back(std::move(e));
  }
  return DatasetManifest(std::move(entries), base_dir);
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  return parse_manifest(in, path.parent_path(), path.string());
}

/// Writes the manifest with paths re-expressed relative to the new file's
/// directory.
inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  const std::filesystem::path dir = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
  bool any_cue = false;
  for (const auto& e : m.entries()) any_cue |= e.cue.has_value();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << (any_cue ? "path,label,cue_x,cue_y,cue_w,cue_h\n" : "path,label\n");
  for (const auto& e : m.entries()) {
    std::filesystem::path p = m.resolve(e);
    std::error_code ec;
    const auto abs_target = std::filesystem::weakly_canonical(std::filesystem::absolute(p), ec);
    const auto abs_dir = std::filesystem::weakly_canonical(std::filesystem::absolute(dir), ec);
    std::filesystem::path rel = abs_target.lexically_relative(abs_dir);
    if (rel.empty()) rel = abs_target;
    out << detail::csv_field(rel.generic_string()) << ',' << detail::csv_field(e.label);
    if (any_cue) {
      if (e.cue) out << ',' << e.cue->x << ',' << e.cue->y << ',' << e.cue->w << ',' << e.cue->h;
      else out << ",,,,";
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Splits.

struct SplitSpec {
  double train = 0.64;
  double validation = 0.16;
  double test = 0.20;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(train > 0.0 && validation > 0.0 && test > 0.0)) throw ParameterError("split fractions must be positive");
    if (std::abs(train + validation + test - 1.0) > 1e-9) throw ParameterError("split fractions must sum to 1");
  }
};

struct SplitResult {
  DatasetManifest train, validation, test;
};

namespace detail {

/// Entry indices grouped per class (class-table order), each group in
/// manifest order.
inline std::vector<std::vector<std::size_t>> indices_by_class(const DatasetManifest& m) {
  std::vector<std::vector<std::size_t>> groups(m.classes().size());
  const std::vector<int> labels = m.labels();
  for (std::size_t i = 0; i < labels.size(); ++i) groups[static_cast<std::size_t>(labels[i])].push_back(i);
  return groups;
}

inline std::size_t floor_share(double fraction, std::size_t count) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(count) + 1e-9));
}

}  // namespace detail

/// Per class: seeded shuffle, then validation and test take floor(frac * n)
/// items each and the remainder goes to train. Outputs keep manifest order.
inline SplitResult stratified_split(const DatasetManifest& m, const SplitSpec& spec) {
  spec.validate();
  std::vector<std::size_t> train, val, test;
  const auto groups = detail::indices_by_class(m);
  for (std::size_t c = 0; c < groups.size(); ++c) {
    std::vector<std::size_t> items = groups[c];
    if (items.size() < 3) {
      throw DataError("class '" + m.classes()[c] + "' has " + std::to_string(items.size()) +
                      " samples; a stratified split needs at least 3");
    }
    Rng rng = Rng::stream(spec.seed, "split", c);
    rng.shuffle(items);
    const std::size_t n_val = detail::floor_share(spec.validation, items.size());
    const std::size_t n_test = detail::floor_share(spec.test, items.size());
    const std::size_t n_train = items.size() - n_val - n_test;
    train.insert(train.end(), items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_train));
    val.insert(val.end(), items.begin() + static_cast<std::ptrdiff_t>(n_train),
               items.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    test.insert(test.end(), items.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), items.end());
  }
  for (auto* v : {&train, &val, &test}) std::sort(v->begin(), v->end());
  return {m.subset(train), m.subset(val), m.subset(test)};
}

struct Fold {
  DatasetManifest train, validation;
};

/// Stratified k-fold: each class's seeded shuffle is dealt round-robin into
/// k folds, the deal continuing across classes so fold totals stay level.
/// Fold i validates on fold i and trains on the rest.
inline std::vector<Fold> kfold(const DatasetManifest& m, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ParameterError("k-fold needs k >= 2");
  std::vector<std::vector<std::size_t>> folds(k);
  const auto groups = detail::indices_by_class(m);
  std::size_t deal = 0;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    std::vector<std::size_t> items = groups[c];
    if (items.size() < k) {
      throw DataError("class '" + m.classes()[c] + "' has " + std::to_string(items.size()) +
                      " samples, fewer than k = " + std::to_string(k));
    }
    Rng rng = Rng::stream(seed, "kfold", c);
    rng.shuffle(items);
    for (std::size_t i : items) folds[deal++ % k].push_back(i);
  }
  std::vector<Fold> out;
  out.reserve(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> train;
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) train.insert(train.end(), folds[g].begin(), folds[g].end());
    }
    std::vector<std::size_t> val = folds[f];
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    out.push_back({m.subset(train), m.subset(val)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// In-memory tensors.

struct PreprocessOptions {
  std::size_t resolution = 32;
  std::size_t channels = 1;
  bool equalize = true;
};

/// Equalize (optional) then letterbox; also maps a cue box into the output frame.
inline ImageGray preprocess(const ImageGray& img, const PreprocessOptions& opt, std::optional<CueBox>* cue = nullptr) {
  const ImageGray eq = opt.equalize ? hist_equalize(img) : img;
  if (cue && cue->has_value()) {
    const LetterboxGeometry g = letterbox_geometry(img.width, img.height, opt.resolution);
    const double sx = static_cast<double>(g.content_w) / static_cast<double>(img.width);
    const double sy = static_cast<double>(g.content_h) / static_cast<double>(img.height);
    const CueBox b = **cue;
    const int x0 = static_cast<int>(std::floor(g.pad_left + b.x * sx));
    const int y0 = static_cast<int>(std::floor(g.pad_top + b.y * sy));
    const int x1 = static_cast<int>(std::ceil(g.pad_left + (b.x + b.w) * sx));
    const int y1 = static_cast<int>(std::ceil(g.pad_top + (b.y + b.h) * sy));
    *cue = CueBox{x0, y0, x1 - x0, y1 - y0};
  }
  return resize_letterbox(eq, opt.resolution);
}

struct TensorDataset {
  Tensor images;  // (N, C, S, S)
  std::vector<int> labels;
  std::vector<std::optional<CueBox>> cues;   // in the S x S frame
  std::vector<ImageGray> preprocessed;       // S x S, kept for overlays
  std::vector<std::string> classes;
  std::vector<std::string> paths;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t resolution() const { return images.dim(2); }

  Tensor batch(std::span<const std::size_t> indices) const {
    const std::size_t per = images.size() / images.dim(0);
    Tensor out({indices.size(), images.dim(1), images.dim(2), images.dim(3)});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(images.data() + indices[i] * per, per, out.data() + i * per);
    }
    return out;
  }

  Tensor sample(std::size_t i) const {
    const std::size_t idx[] = {i};
    return batch(idx);
  }

  TensorDataset subset(std::span<const std::size_t> indices) const {
    TensorDataset d;
    d.images = batch(indices);
    d.classes = classes;
    for (std::size_t i : indices) {
      d.labels.push_back(labels[i]);
      d.cues.push_back(cues.empty() ? std::nullopt : cues[i]);
      if (!preprocessed.empty()) d.preprocessed.push_back(preprocessed[i]);
      if (!paths.empty()) d.paths.push_back(paths[i]);
    }
    return d;
  }
};

/// Labels index into `classes` when given (e.g. a checkpoint's class table),
/// otherwise into the manifest's own table.
inline TensorDataset load_dataset(const DatasetManifest& m, const PreprocessOptions& opt,
                                  const std::vector<std::string>& classes = {}) {
  if (m.empty()) throw DataError("cannot load an empty manifest");
  TensorDataset d;
  d.classes = classes.empty() ? m.classes() : classes;
  const auto label_of = [&d](const std::string& label) {
    const auto it = std::find(d.classes.begin(), d.classes.end(), label);
    if (it == d.classes.end()) throw DataError("label '" + label + "' is not in the class table");
    return static_cast<int>(it - d.classes.begin());
  };
  d.images = Tensor({m.size(), opt.channels, opt.resolution, opt.resolution});
  const std::size_t per = opt.channels * opt.resolution * opt.resolution;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const ManifestEntry& e = m.entries()[i];
    std::optional<CueBox> cue = e.cue;
    const ImageGray img = preprocess(load_image(m.resolve(e)), opt, &cue);
    const Tensor t = to_tensor(img, opt.channels);
    std::copy(t.values().begin(), t.values().end(), d.images.data() + i * per);
    d.labels.push_back(label_of(e.label));
    d.cues.push_back(cue);
    d.preprocessed.push_back(img);
    d.paths.push_back(m.resolve(e).string());
  }
  return d;
}

}  // namespace densepipe
