#pragma once

// Grad-CAM: channel weights are the spatial mean of d(class logit)/d(activation);
// the map is ReLU(sum_c weight_c * activation_c), normalised by its maximum.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "densepipe/error.hpp"
#include "densepipe/image.hpp"
#include "densepipe/model.hpp"

namespace densepipe {

struct Heatmap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major, each in [0, 1]

  Heatmap() = default;
  Heatmap(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  double max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }
};

/// Grad-CAM from one sample's activation and gradient, both (C, H, W) or (1, C, H, W).
inline Heatmap gradcam_from(const Tensor& activation, const Tensor& gradient) {
  if (activation.shape() != gradient.shape()) throw ShapeError("gradient", "activation and gradient shapes differ");
  Shape s = activation.shape();
  if (s.size() == 4) {
    if (s[0] != 1) throw ShapeError("batch", "gradcam works on a single sample");
    s.erase(s.begin());
  }
  if (s.size() != 3) throw ShapeError("rank", "gradcam target layer has no spatial extent");
  const std::size_t channels = s[0], h = s[1], w = s[2], plane = h * w;
  Heatmap map(h, w);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* g = gradient.data() + c * plane;
    double alpha = 0.0;
    for (std::size_t i = 0; i < plane; ++i) alpha += g[i];
    alpha /= static_cast<double>(plane);
    const double* a = activation.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) map.values[i] += alpha * a[i];
  }
  double peak = 0.0;
  for (double& v : map.values) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak > 0.0) {
    for (double& v : map.values) v /= peak;
  } else {
    std::fill(map.values.begin(), map.values.end(), 0.0);
  }
  return map;
}

/// Heatmap at the target layer's resolution. `target_layer` defaults to the
/// last dense block's concatenated output. `logit_scale` multiplies the
/// upstream gradient of the class logit.
inline Heatmap gradcam(const ModelGraph& model, const Tensor& input, std::size_t class_index,
                       std::string target_layer = {}, double logit_scale = 1.0) {
  if (class_index >= model.config.num_classes) {
    throw ParameterError("class index " + std::to_string(class_index) + " out of range");
  }
  if (target_layer.empty()) target_layer = model.default_target_layer();
  const int target = model.find(target_layer);
  if (target < 0) throw ConfigError("no layer named '" + target_layer + "'");
  const Tensor batch = input.rank() == 3 ? input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)}) : input;
  if (batch.dim(0) != 1) throw ShapeError("batch", "gradcam explains one sample at a time");
  const ForwardPass pass = infer(model, batch);
  const Tensor& act = pass.outputs[static_cast<std::size_t>(target)];
  if (act.rank() != 4) throw ShapeError("rank", "layer '" + target_layer + "' has no spatial extent");
  Tensor upstream(pass.logits().shape());
  upstream[class_index] = logit_scale;
  // Freeze everything so the reverse sweep stops at the target layer.
  std::set<std::string> all;
  for (const auto& [name, t] : model.graph.params) all.insert(name);
  const BackwardPass back = run_backward(model.graph, pass, upstream, all, target);
  return gradcam_from(act, back.captured);
}

/// Bilinear resize with aligned corners (corner samples map to corner samples).
inline Heatmap upsample_bilinear(const Heatmap& h, std::size_t out_h, std::size_t out_w) {
  if (out_h < 1 || out_w < 1) throw ParameterError("upsample target must be at least 1x1");
  if (h.height == 0 || h.width == 0) throw ParameterError("cannot upsample an empty heatmap");
  Heatmap out(out_h, out_w);
  const auto coord = [](std::size_t i, std::size_t n_out, std::size_t n_in) {
    return n_out > 1 ? static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1) : 0.0;
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = coord(y, out_h, h.height);
    const auto y0 = std::min(static_cast<std::size_t>(fy), h.height - 1);
    const std::size_t y1 = std::min(y0 + 1, h.height - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = coord(x, out_w, h.width);
      const auto x0 = std::min(static_cast<std::size_t>(fx), h.width - 1);
      const std::size_t x1 = std::min(x0 + 1, h.width - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = h.at(y0, x0) * (1.0 - tx) + h.at(y0, x1) * tx;
      const double bottom = h.at(y1, x0) * (1.0 - tx) + h.at(y1, x1) * tx;
      out.at(y, x) = std::clamp(top * (1.0 - ty) + bottom * ty, 0.0, 1.0);
    }
  }
  return out;
}

/// Yellow (low) to red (high) ramp: (255, round(255 * (1 - v)), 0).
inline std::array<double, 3> heat_color(double v) { return {255.0, std::round(255.0 * (1.0 - v)), 0.0}; }

/// out = (1 - alpha*v) * gray + alpha*v * color(v), rounded per channel.
inline ImageRgb colorize_overlay(const Heatmap& h, const ImageGray& img, double alpha = 0.4) {
  if (h.height != img.height || h.width != img.width) {
    throw ShapeError("height", "heatmap " + std::to_string(h.width) + "x" + std::to_string(h.height) +
                                   " does not match image " + std::to_string(img.width) + "x" + std::to_string(img.height));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("overlay alpha must lie in [0, 1]");
  ImageRgb out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double v = std::clamp(h.at(y, x), 0.0, 1.0);
      const double g = img.at(x, y);
      const double w = alpha * v;
      const auto color = heat_color(v);
      std::array<std::uint8_t, 3> px{};
      for (int c = 0; c < 3; ++c) {
        px[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(
            std::clamp<long>(std::lround((1.0 - w) * g + w * color[static_cast<std::size_t>(c)]), 0, 255));
      }
      out.set(x, y, px);
    }
  }
  return out;
}

/// Colour-ramped heatmap on black, for the left panel of the side-by-side view.
inline ImageRgb render_heatmap(const Heatmap& h) {
  return colorize_overlay(h, ImageGray(h.width, h.height, 0), 1.0);
}

/// [heatmap | overlay] side by side.
inline ImageRgb side_by_side(const ImageRgb& left, const ImageRgb& right) {
  if (left.height != right.height) throw ShapeError("height", "panels must share a height");
  ImageRgb out(left.width + right.width, left.height);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < left.width; ++x) out.set(x, y, left.at(x, y));
    for (std::size_t x = 0; x < right.width; ++x) out.set(left.width + x, y, right.at(x, y));
  }
  return out;
}

/// Fraction of total heatmap mass inside `box` (pixel units of the map).
template <typename Box>
double mass_inside(const Heatmap& h, const Box& box) {
  double inside = 0.0, total = 0.0;
  for (std::size_t y = 0; y < h.height; ++y) {
    for (std::size_t x = 0; x < h.width; ++x) {
      const double v = h.at(y, x);
      total += v;
      if (static_cast<int>(x) >= box.x && static_cast<int>(x) < box.x + box.w && static_cast<int>(y) >= box.y &&
          static_cast<int>(y) < box.y + box.h) {
        inside += v;
      }
    }
  }
  return total > 0.0 ? inside / total : 0.0;
}

}  // namespace densepipe
