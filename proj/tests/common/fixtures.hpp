#pragma once

// Small in-memory datasets and scratch directories for the unit tests.

#include <filesystem>
#include <string>
#include <unistd.h>

#include "densepipe/dataset.hpp"
#include "densepipe/model.hpp"
#include "densepipe/synth.hpp"

namespace densepipe::testing {

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("densepipe-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// A deliberately small backbone so training tests run in seconds.
inline DenseNetConfig tiny_config(std::uint64_t seed = 1) {
  DenseNetConfig c;
  c.stem = {3, 1, 8, false};
  c.block_sizes = {2, 2};
  c.growth_rate = 6;
  c.head = {{16}, 0.5};
  c.seed = seed;
  return c;
}

/// Synthetic images built straight into tensors, alternating labels.
inline TensorDataset synthetic_set(std::size_t n, std::uint64_t seed,
                                   SynthVariant variant = SynthVariant::target, std::size_t resolution = 32) {
  TensorDataset d;
  d.classes = {"female", "male"};
  d.images = Tensor({n, 1, resolution, resolution});
  const std::size_t per = resolution * resolution;
  PreprocessOptions opt;
  opt.resolution = resolution;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    Rng rng = Rng::stream(seed, "unit-synth", i);
    const SynthSample s = synth_image(resolution, label, rng, variant);
    std::optional<CueBox> cue = s.cue;
    const ImageGray img = preprocess(s.image, opt, &cue);
    const Tensor t = to_tensor(img);
    std::copy(t.values().begin(), t.values().end(), d.images.data() + i * per);
    d.labels.push_back(label);
    d.cues.push_back(cue);
    d.preprocessed.push_back(img);
  }
  return d;
}

/// Manifest with `per_class[c]` entries labelled "c<c>" (female/male for two classes).
inline DatasetManifest labelled_manifest(const std::vector<std::size_t>& per_class) {
  std::vector<ManifestEntry> entries;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const std::string label = per_class.size() == 2 ? (c == 0 ? "female" : "male") : "c" + std::to_string(c);
    for (std::size_t i = 0; i < per_class[c]; ++i) {
      entries.push_back({label + "_" + std::to_string(i) + ".pgm", label, std::nullopt});
    }
  }
  return DatasetManifest(std::move(entries));
}

}  // namespace densepipe::testing
