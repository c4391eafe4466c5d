#pragma once

// Synthetic radiograph-like dataset: a dark, noisy background with a bright
// U-shaped arch in the lower half of the frame. The arch's horizontal spread
// carries the class: "female" (class 0) gets a wide flare, "male" (class 1) a
// narrow one. The arch bounding box is recorded as the cue box.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "densepipe/dataset.hpp"
#include "densepipe/error.hpp"
#include "densepipe/image.hpp"
#include "densepipe/tensor.hpp"

namespace densepipe {

inline constexpr const char* kSynthLabels[2] = {"female", "male"};

/// `source` shifts brightness, noise and stroke width so it can serve as a
/// related pretraining domain for the `target` distribution.
enum class SynthVariant { target, source };

struct SynthOptions {
  std::size_t n = 1000;
  std::size_t resolution = 32;
  double class_balance = 0.5;  // fraction of class 0
  std::uint64_t seed = 0;
  SynthVariant variant = SynthVariant::target;
};

struct SynthSample {
  ImageGray image;
  CueBox cue;
};

inline SynthSample synth_image(std::size_t resolution, int label, Rng& rng, SynthVariant variant = SynthVariant::target) {
  const bool source = variant == SynthVariant::source;
  const double r = static_cast<double>(resolution);
  const double s = r / 32.0;
  const double bg = source ? rng.uniform(40.0, 75.0) : rng.uniform(20.0, 50.0);
  const double grad_x = rng.uniform(-10.0, 10.0);
  const double grad_y = rng.uniform(0.0, 15.0);
  const double noise = source ? 9.0 : 5.0;
  const double level = source ? rng.uniform(120.0, 200.0) : rng.uniform(140.0, 230.0);
  const double cx = rng.uniform(0.35, 0.65) * r;
  const double cy = rng.uniform(0.57, 0.63) * r;
  const double b = rng.uniform(0.24, 0.27) * r;
  const double a = label == 0 ? rng.uniform(0.31, 0.36) * r : rng.uniform(0.16, 0.21) * r;
  const double sigma = (source ? 1.1 : 0.9) * s;
  const double cutoff = 2.2 * sigma;

  SynthSample out{ImageGray(resolution, resolution), CueBox{}};
  int x0 = static_cast<int>(resolution), y0 = static_cast<int>(resolution), x1 = -1, y1 = -1;
  for (std::size_t y = 0; y < resolution; ++y) {
    for (std::size_t x = 0; x < resolution; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double dx = px - cx, dy = py - cy;
      double d = 0.0;
      if (dy >= 0.0) {
        // Sampson distance to the lower half of the ellipse.
        const double f = dx * dx / (a * a) + dy * dy / (b * b) - 1.0;
        const double gx = 2.0 * dx / (a * a), gy = 2.0 * dy / (b * b);
        d = std::abs(f) / std::max(std::sqrt(gx * gx + gy * gy), 1e-12);
      } else {
        const double ex = std::abs(dx) - a;
        d = std::sqrt(ex * ex + dy * dy);
      }
      double v = bg + grad_x * (px / r - 0.5) + grad_y * (py / r) + noise * rng.normal();
      if (d < cutoff) {
        v += level * std::exp(-d * d / (2.0 * sigma * sigma));
        x0 = std::min(x0, static_cast<int>(x));
        y0 = std::min(y0, static_cast<int>(y));
        x1 = std::max(x1, static_cast<int>(x));
        y1 = std::max(y1, static_cast<int>(y));
      }
      out.image.at(x, y) = static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
    }
  }
  out.cue = CueBox{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
  return out;
}

/// Writes `img_NNNNNN.pgm` files plus `manifest.csv` into `out_dir`.
inline DatasetManifest synth_generate(const SynthOptions& opt, const std::filesystem::path& out_dir) {
  if (opt.n < 2) throw ParameterError("synthetic dataset needs n >= 2");
  if (opt.resolution < 32) throw ParameterError("synthetic resolution must be at least 32");
  if (!(opt.class_balance >= 0.0 && opt.class_balance <= 1.0)) throw ParameterError("class balance must lie in [0, 1]");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError("cannot create output directory '" + out_dir.string() + "'");
  }
  const std::string tag = opt.variant == SynthVariant::source ? "synth-source" : "synth-target";
  const auto n0 = static_cast<std::size_t>(std::llround(static_cast<double>(opt.n) * opt.class_balance));
  std::vector<int> labels(opt.n, 1);
  std::fill_n(labels.begin(), n0, 0);
  Rng label_rng = Rng::stream(opt.seed, tag + "-labels");
  label_rng.shuffle(labels);

  std::vector<ManifestEntry> entries;
  entries.reserve(opt.n);
  for (std::size_t i = 0; i < opt.n; ++i) {
    Rng rng = Rng::stream(opt.seed, tag + "-image", i);
    const SynthSample sample = synth_image(opt.resolution, labels[i], rng, opt.variant);
    char name[32];
    std::snprintf(name, sizeof name, "img_%06zu.pgm", i);
    save_pgm(sample.image, out_dir / name);
    entries.push_back({name, kSynthLabels[labels[i]], sample.cue});
  }
  DatasetManifest m(std::move(entries), out_dir);
  write_manifest(m, out_dir / "manifest.csv");
  return m;
}

}  // namespace densepipe
