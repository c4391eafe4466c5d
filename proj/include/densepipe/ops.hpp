#pragma once

// Differentiable layer primitives. Every forward function is a pure function
// of its inputs; backward functions take the saved forward inputs (or caches)
// plus the upstream gradient and return gradients for each input.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "densepipe/error.hpp"
#include "densepipe/tensor.hpp"

namespace densepipe {

enum class Mode { train, eval };

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError("rank", std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                                 shape_string(t.shape()));
  }
}

// Output columns [lo, hi) read inside the image for kernel offset j.
inline void valid_range(std::size_t j, std::size_t stride, std::size_t pad, std::size_t width, std::size_t out_w,
                        std::size_t& lo, std::size_t& hi) {
  lo = 0;
  while (lo < out_w && lo * stride + j < pad) ++lo;
  hi = lo;
  while (hi < out_w && hi * stride + j < pad + width) ++hi;
}

inline void im2col(const double* x, std::size_t channels, std::size_t height, std::size_t width,
                   std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                   std::size_t out_h, std::size_t out_w, double* col, std::size_t ld = 0) {
  const std::size_t plane = ld ? ld : out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* xc = x + c * height * width;
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        double* row = col + ((c * kh + i) * kw + j) * plane;
        std::size_t lo = 0, hi = 0;
        valid_range(j, stride, pad, width, out_w, lo, hi);
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) - static_cast<std::ptrdiff_t>(pad);
          double* dst = row + oh * out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height) || lo >= hi) {
            std::fill(dst, dst + out_w, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(ih) * width + (lo * stride + j - pad);
          std::fill(dst, dst + lo, 0.0);
          if (stride == 1) {
            std::copy(src, src + (hi - lo), dst + lo);
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = src[(ow - lo) * stride];
          }
          std::fill(dst + hi, dst + out_w, 0.0);
        }
      }
    }
  }
}

// Reductions with a fixed four-lane order. Eigen's own sum() peels by address
// alignment, which would make results depend on where a buffer landed.
template <class F>
inline double lane_sum(std::size_t n, F term) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    for (std::size_t j = 0; j < 4; ++j) acc[j] += term(i + j);
  }
  for (; i < n; ++i) acc[0] += term(i);
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

inline double plane_sum(const double* p, std::size_t n) {
  return lane_sum(n, [p](std::size_t i) { return p[i]; });
}

inline double plane_dot(const double* a, const double* b, std::size_t n) {
  return lane_sum(n, [a, b](std::size_t i) { return a[i] * b[i]; });
}

inline double plane_sq_dev(const double* p, std::size_t n, double mean) {
  return lane_sum(n, [p, mean](std::size_t i) {
    const double d = p[i] - mean;
    return d * d;
  });
}

// Per-thread im2col workspaces, grown on demand and reused across calls.
inline std::vector<double>& scratch(int slot, std::size_t size) {
  thread_local std::vector<double> buffers[3];
  std::vector<double>& b = buffers[slot];
  if (b.size() < size) b.resize(size);
  return b;
}

// Accumulates columns back into the (zeroed) image buffer.
inline void col2im(const double* col, std::size_t channels, std::size_t height, std::size_t width,
                   std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                   std::size_t out_h, std::size_t out_w, double* x, std::size_t ld = 0) {
  const std::size_t plane = ld ? ld : out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    double* xc = x + c * height * width;
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const double* row = col + ((c * kh + i) * kw + j) * plane;
        std::size_t lo = 0, hi = 0;
        valid_range(j, stride, pad, width, out_w, lo, hi);
        if (lo >= hi) continue;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) - static_cast<std::ptrdiff_t>(pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) continue;
          double* dst = xc + static_cast<std::size_t>(ih) * width + (lo * stride + j - pad);
          const double* src = row + oh * out_w;
          if (stride == 1) {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow - lo] += src[ow];
          } else {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[(ow - lo) * stride] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, no kernel flip.

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad == 0; }
  bool wide() const { return stride == 1 && !pointwise() && in_channels >= 8; }
};

namespace detail {

// Stride-1 convolutions skip im2col. With zero-padded planes and output rows
// as wide as a padded row, tap (i, j) reads the padded input at the fixed
// offset i*row + j, so each tap is one GEMM on a strided view.
struct WideLayout {
  std::size_t row, plane, span;
};

inline WideLayout wide_layout(const ConvGeometry& g) {
  const std::size_t row = g.width + 2 * g.pad;
  return {row, (g.height + 2 * g.pad) * row + g.kernel_w - 1, g.out_h * row};
}

inline void pad_planes(const double* x, const ConvGeometry& g, const WideLayout& l, double* dst) {
  std::fill(dst, dst + g.in_channels * l.plane, 0.0);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t h = 0; h < g.height; ++h) {
      std::copy_n(x + (c * g.height + h) * g.width, g.width, dst + c * l.plane + (h + g.pad) * l.row + g.pad);
    }
  }
}

/// taps[t] is the (out_channels x in_channels) slice of kernel position t.
inline std::vector<double> tap_weights(const Tensor& w, const ConvGeometry& g) {
  const std::size_t kk = g.kernel_h * g.kernel_w;
  std::vector<double> taps(kk * g.out_channels * g.in_channels);
  for (std::size_t o = 0; o < g.out_channels; ++o)
    for (std::size_t c = 0; c < g.in_channels; ++c)
      for (std::size_t t = 0; t < kk; ++t) taps[(t * g.out_channels + o) * g.in_channels + c] = w.data()[(o * g.in_channels + c) * kk + t];
  return taps;
}

using StridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

inline StridedMap tap_view(const double* padded, const ConvGeometry& g, const WideLayout& l, std::size_t t) {
  const std::size_t off = (t / g.kernel_w) * l.row + t % g.kernel_w;
  return StridedMap(padded + off, static_cast<Eigen::Index>(g.in_channels), static_cast<Eigen::Index>(l.span),
                    Eigen::OuterStride<>(static_cast<Eigen::Index>(l.plane)));
}

}  // namespace detail

inline ConvGeometry conv_geometry(const Tensor& x, const Tensor& weights, std::size_t stride, std::size_t pad) {
  detail::require_rank(x, 4, "conv2d input");
  detail::require_rank(weights, 4, "conv2d weights");
  if (stride == 0) throw ParameterError("conv2d stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weights.dim(0), weights.dim(2), weights.dim(3),
                 stride, pad, 0, 0};
  if (weights.dim(1) != g.in_channels) {
    throw ShapeError("channel", "input has " + std::to_string(g.in_channels) + " channels, kernel expects " +
                                    std::to_string(weights.dim(1)));
  }
  if (g.height + 2 * pad < g.kernel_h) throw ShapeError("height", "padded input shorter than kernel");
  if (g.width + 2 * pad < g.kernel_w) throw ShapeError("width", "padded input narrower than kernel");
  g.out_h = (g.height + 2 * pad - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel_w) / stride + 1;
  return g;
}

inline Tensor conv2d(const Tensor& x, const Tensor& weights, std::span<const double> bias, std::size_t stride,
                     std::size_t pad) {
  const ConvGeometry g = conv_geometry(x, weights, stride, pad);
  if (!bias.empty() && bias.size() != g.out_channels) {
    throw ShapeError("bias", "expected " + std::to_string(g.out_channels) + " bias values");
  }
  Tensor out({g.batch, g.out_channels, g.out_h, g.out_w});
  const std::size_t k = g.in_channels * g.kernel_h * g.kernel_w;
  const std::size_t plane = g.out_h * g.out_w;
  if (g.wide()) {
    const detail::WideLayout l = detail::wide_layout(g);
    std::vector<double>& padded = detail::scratch(0, g.in_channels * l.plane);
    std::vector<double>& acc = detail::scratch(1, g.out_channels * l.span);
    const std::vector<double> taps = detail::tap_weights(weights, g);
    const std::size_t kk = g.kernel_h * g.kernel_w;
    for (std::size_t n = 0; n < g.batch; ++n) {
      detail::pad_planes(x.data() + n * g.in_channels * g.height * g.width, g, l, padded.data());
      detail::MatMap y(acc.data(), static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(l.span));
      for (std::size_t t = 0; t < kk; ++t) {
        detail::ConstMatMap wt(taps.data() + t * g.out_channels * g.in_channels,
                               static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(g.in_channels));
        if (t == 0) {
          y.noalias() = wt * detail::tap_view(padded.data(), g, l, t);
        } else {
          y.noalias() += wt * detail::tap_view(padded.data(), g, l, t);
        }
      }
      for (std::size_t o = 0; o < g.out_channels; ++o) {
        const double b = bias.empty() ? 0.0 : bias[o];
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const double* src = acc.data() + o * l.span + oh * l.row;
          double* dst = out.data() + ((n * g.out_channels + o) * g.out_h + oh) * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) dst[ow] = src[ow] + b;
        }
      }
    }
    return out;
  }
  std::vector<double>& col = detail::scratch(0, g.pointwise() ? 0 : k * plane);
  detail::ConstMatMap w(weights.data(), static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(k));
  for (std::size_t n = 0; n < g.batch; ++n) {
    const double* xn = x.data() + n * g.in_channels * g.height * g.width;
    const double* cols = xn;
    if (!g.pointwise()) {
      detail::im2col(xn, g.in_channels, g.height, g.width, g.kernel_h, g.kernel_w, stride, pad, g.out_h,
                     g.out_w, col.data());
      cols = col.data();
    }
    detail::ConstMatMap c(cols, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
    detail::MatMap y(out.data() + n * g.out_channels * plane, static_cast<Eigen::Index>(g.out_channels),
                     static_cast<Eigen::Index>(plane));
    y.noalias() = w * c;
    if (!bias.empty()) {
      for (std::size_t o = 0; o < g.out_channels; ++o) y.row(static_cast<Eigen::Index>(o)).array() += bias[o];
    }
  }
  return out;
}

struct Conv2dGrads {
  Tensor input;                 // empty when not requested
  Tensor weights;               // empty when not requested
  std::vector<double> bias;     // empty when not requested
};

struct GradRequest {
  bool input = true;
  bool params = true;
};

inline Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& weights, bool has_bias, std::size_t stride,
                                   std::size_t pad, const Tensor& upstream, GradRequest want = {}) {
  const ConvGeometry g = conv_geometry(x, weights, stride, pad);
  if (upstream.shape() != Shape{g.batch, g.out_channels, g.out_h, g.out_w}) {
    throw ShapeError("upstream", "conv2d upstream gradient has shape " + shape_string(upstream.shape()));
  }
  Conv2dGrads grads;
  const std::size_t k = g.in_channels * g.kernel_h * g.kernel_w;
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t in_plane = g.in_channels * g.height * g.width;
  if (want.input) grads.input = Tensor(x.shape());
  if (want.params) {
    grads.weights = Tensor(weights.shape());
    if (has_bias) grads.bias.assign(g.out_channels, 0.0);
  }
  if (!want.input && !want.params) return grads;

  // With stride 1 and a square kernel the input gradient is itself a
  // convolution of the upstream gradient with the flipped, transposed kernel.
  const std::size_t back_pad = g.kernel_h - 1 - std::min(pad, g.kernel_h - 1);
  const bool direct = want.input && !g.pointwise() && stride == 1 && g.kernel_h == g.kernel_w && pad < g.kernel_h;
  const std::size_t kt = g.out_channels * g.kernel_h * g.kernel_w;
  const detail::WideLayout l = detail::wide_layout(g);
  const bool wide = want.params && g.wide();
  std::vector<double>& col = detail::scratch(0, g.pointwise() || !want.params ? 0 : (wide ? g.in_channels * l.plane : k * plane));
  std::vector<double>& dcol = detail::scratch(1, g.pointwise() || !want.input ? 0 : (direct ? kt * in_plane / g.in_channels : k * plane));
  std::vector<double>& wide_dy = detail::scratch(2, wide ? g.out_channels * l.span : 0);
  std::vector<double> dtaps(wide ? g.kernel_h * g.kernel_w * g.out_channels * g.in_channels : 0);
  std::vector<double> flipped(direct ? g.in_channels * kt : 0);
  if (direct) {
    const std::size_t kk = g.kernel_h * g.kernel_w;
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t c = 0; c < g.in_channels; ++c)
        for (std::size_t t = 0; t < kk; ++t) flipped[c * kt + o * kk + t] = weights.data()[(o * g.in_channels + c) * kk + kk - 1 - t];
  }
  detail::ConstMatMap w(weights.data(), static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(k));
  for (std::size_t n = 0; n < g.batch; ++n) {
    detail::ConstMatMap dy(upstream.data() + n * g.out_channels * plane, static_cast<Eigen::Index>(g.out_channels),
                           static_cast<Eigen::Index>(plane));
    const double* xn = x.data() + n * in_plane;
    if (wide) {
      detail::pad_planes(xn, g, l, col.data());
      std::fill(wide_dy.begin(), wide_dy.begin() + static_cast<std::ptrdiff_t>(g.out_channels * l.span), 0.0);
      for (std::size_t o = 0; o < g.out_channels; ++o)
        for (std::size_t oh = 0; oh < g.out_h; ++oh)
          std::copy_n(upstream.data() + ((n * g.out_channels + o) * g.out_h + oh) * g.out_w, g.out_w,
                      wide_dy.data() + o * l.span + oh * l.row);
      detail::ConstMatMap dyw(wide_dy.data(), static_cast<Eigen::Index>(g.out_channels), static_cast<Eigen::Index>(l.span));
      for (std::size_t t = 0; t < g.kernel_h * g.kernel_w; ++t) {
        detail::MatMap dwt(dtaps.data() + t * g.out_channels * g.in_channels, static_cast<Eigen::Index>(g.out_channels),
                           static_cast<Eigen::Index>(g.in_channels));
        dwt.noalias() += dyw * detail::tap_view(col.data(), g, l, t).transpose();
      }
      if (has_bias) {
        for (std::size_t o = 0; o < g.out_channels; ++o) grads.bias[o] += detail::plane_sum(upstream.data() + (n * g.out_channels + o) * plane, plane);
      }
    } else if (want.params) {
      const double* cols = xn;
      if (!g.pointwise()) {
        detail::im2col(xn, g.in_channels, g.height, g.width, g.kernel_h, g.kernel_w, stride, pad, g.out_h,
                       g.out_w, col.data());
        cols = col.data();
      }
      detail::ConstMatMap c(cols, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
      detail::MatMap dw(grads.weights.data(), static_cast<Eigen::Index>(g.out_channels),
                        static_cast<Eigen::Index>(k));
      dw.noalias() += dy * c.transpose();
      if (has_bias) {
        for (std::size_t o = 0; o < g.out_channels; ++o) grads.bias[o] += detail::plane_sum(upstream.data() + (n * g.out_channels + o) * plane, plane);
      }
    }
    if (want.input) {
      double* dxn = grads.input.data() + n * in_plane;
      if (g.pointwise()) {
        detail::MatMap dx(dxn, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
        dx.noalias() = w.transpose() * dy;
      } else if (direct) {
        const std::size_t in_hw = g.height * g.width;
        detail::im2col(upstream.data() + n * g.out_channels * plane, g.out_channels, g.out_h, g.out_w, g.kernel_h,
                       g.kernel_w, 1, back_pad, g.height, g.width, dcol.data());
        detail::ConstMatMap wt(flipped.data(), static_cast<Eigen::Index>(g.in_channels), static_cast<Eigen::Index>(kt));
        detail::ConstMatMap dc(dcol.data(), static_cast<Eigen::Index>(kt), static_cast<Eigen::Index>(in_hw));
        detail::MatMap dx(dxn, static_cast<Eigen::Index>(g.in_channels), static_cast<Eigen::Index>(in_hw));
        dx.noalias() = wt * dc;
      } else {
        detail::MatMap dc(dcol.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
        dc.noalias() = w.transpose() * dy;
        detail::col2im(dcol.data(), g.in_channels, g.height, g.width, g.kernel_h, g.kernel_w, stride, pad,
                       g.out_h, g.out_w, dxn);
      }
    }
  }
  if (wide) {
    const std::size_t kk = g.kernel_h * g.kernel_w;
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t c = 0; c < g.in_channels; ++c)
        for (std::size_t t = 0; t < kk; ++t)
          grads.weights.data()[(o * g.in_channels + c) * kk + t] = dtaps[(t * g.out_channels + o) * g.in_channels + c];
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

/// Views onto the learnable affine terms and the running statistics of one
/// normalization layer. Running statistics are updated in place in train mode.
struct BatchNormRefs {
  std::span<const double> gamma;
  std::span<const double> beta;
  std::span<double> running_mean;
  std::span<double> running_var;
  double momentum = 0.9;
  double epsilon = 1e-5;
};

struct BatchNormState {
  std::vector<double> gamma, beta, running_mean, running_var;
  double momentum = 0.9;
  double epsilon = 1e-5;

  explicit BatchNormState(std::size_t channels)
      : gamma(channels, 1.0), beta(channels, 0.0), running_mean(channels, 0.0), running_var(channels, 1.0) {}

  BatchNormRefs refs() { return {gamma, beta, running_mean, running_var, momentum, epsilon}; }
};

struct BatchNormCache {
  Tensor normalized;             // x-hat
  std::vector<double> inv_std;   // per channel
  Mode mode = Mode::train;
};

/// Running statistics: running = momentum * running + (1 - momentum) * batch,
/// with the unbiased batch variance. Normalization uses the biased variance.
inline Tensor batch_norm(const Tensor& x, const BatchNormRefs& bn, Mode mode, BatchNormCache* cache = nullptr,
                         bool update_running = true) {
  detail::require_rank(x, 4, "batch_norm input");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (bn.gamma.size() != channels || bn.beta.size() != channels || bn.running_mean.size() != channels ||
      bn.running_var.size() != channels) {
    throw ShapeError("channel", "batch_norm parameters do not match " + std::to_string(channels) + " channels");
  }
  if (!(bn.epsilon > 0.0)) throw ParameterError("batch_norm epsilon must be positive");
  const std::size_t count = batch * plane;
  if (mode == Mode::train && count < 2) {
    throw DegenerateBatchError("batch_norm in train mode needs at least two values per channel");
  }
  Tensor out(x.shape());
  Tensor normalized;
  if (cache) normalized = Tensor(x.shape());
  std::vector<double> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double mean = 0.0, var = 0.0;
    if (mode == Mode::train) {
      for (std::size_t n = 0; n < batch; ++n) mean += detail::plane_sum(x.data() + (n * channels + c) * plane, plane);
      mean /= static_cast<double>(count);
      for (std::size_t n = 0; n < batch; ++n) {
        var += detail::plane_sq_dev(x.data() + (n * channels + c) * plane, plane, mean);
      }
      const double sum_sq = var;
      var /= static_cast<double>(count);
      if (update_running) {
        const double unbiased = sum_sq / static_cast<double>(count - 1);
        bn.running_mean[c] = bn.momentum * bn.running_mean[c] + (1.0 - bn.momentum) * mean;
        bn.running_var[c] = bn.momentum * bn.running_var[c] + (1.0 - bn.momentum) * unbiased;
      }
    } else {
      mean = bn.running_mean[c];
      var = bn.running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + bn.epsilon);
    inv_std[c] = is;
    const double g = bn.gamma[c], b = bn.beta[c];
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      const double* p = x.data() + off;
      double* o = out.data() + off;
      if (cache) {
        double* h = normalized.data() + off;
        for (std::size_t i = 0; i < plane; ++i) {
          h[i] = (p[i] - mean) * is;
          o[i] = g * h[i] + b;
        }
      } else {
        for (std::size_t i = 0; i < plane; ++i) o[i] = g * ((p[i] - mean) * is) + b;
      }
    }
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return out;
}

inline Tensor batch_norm(const Tensor& x, BatchNormState& state, Mode mode, BatchNormCache* cache = nullptr) {
  return batch_norm(x, state.refs(), mode, cache);
}

struct BatchNormGrads {
  Tensor input;
  std::vector<double> gamma, beta;
};

inline BatchNormGrads batch_norm_backward(const Tensor& upstream, std::span<const double> gamma,
                                          const BatchNormCache& cache, GradRequest want = {}) {
  const Tensor& xhat = cache.normalized;
  if (upstream.shape() != xhat.shape()) throw ShapeError("upstream", "batch_norm upstream gradient shape mismatch");
  const std::size_t batch = xhat.dim(0), channels = xhat.dim(1), plane = xhat.dim(2) * xhat.dim(3);
  const double count = static_cast<double>(batch * plane);
  BatchNormGrads grads;
  grads.gamma.assign(channels, 0.0);
  grads.beta.assign(channels, 0.0);
  if (want.input) grads.input = Tensor(xhat.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      sum_dy += detail::plane_sum(upstream.data() + off, plane);
      sum_dy_xhat += detail::plane_dot(upstream.data() + off, xhat.data() + off, plane);
    }
    grads.gamma[c] = sum_dy_xhat;
    grads.beta[c] = sum_dy;
    if (!want.input) continue;
    const double scale = gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      const double* dy = upstream.data() + off;
      const double* h = xhat.data() + off;
      double* dx = grads.input.data() + off;
      if (cache.mode == Mode::train) {
        for (std::size_t i = 0; i < plane; ++i) {
          dx[i] = scale * (dy[i] - sum_dy / count - h[i] * sum_dy_xhat / count);
        }
      } else {
        for (std::size_t i = 0; i < plane; ++i) dx[i] = scale * dy[i];
      }
    }
  }
  if (!want.params) {
    grads.gamma.clear();
    grads.beta.clear();
  }
  return grads;
}

// ---------------------------------------------------------------------------
// ReLU. Subgradient at exactly zero is 0.

inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  const double* in = x.data();
  double* o = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
  return out;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& upstream) {
  if (upstream.shape() != x.shape()) throw ShapeError("upstream", "relu upstream gradient shape mismatch");
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? upstream[i] : 0.0;
  return dx;
}

// ---------------------------------------------------------------------------
// Pooling.

/// Non-overlapping average pooling (window == stride). Extents must divide.
inline Tensor avg_pool(const Tensor& x, std::size_t size = 2, std::size_t stride = 2) {
  detail::require_rank(x, 4, "avg_pool input");
  if (size == 0 || size != stride) throw ParameterError("avg_pool supports only window == stride > 0");
  if (x.dim(2) % size != 0) throw ShapeError("height", "height " + std::to_string(x.dim(2)) + " not divisible by " + std::to_string(size));
  if (x.dim(3) % size != 0) throw ShapeError("width", "width " + std::to_string(x.dim(3)) + " not divisible by " + std::to_string(size));
  const std::size_t n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / size, ow = w / size;
  Tensor out({x.dim(0), x.dim(1), oh, ow});
  const double inv = 1.0 / static_cast<double>(size * size);
  for (std::size_t p = 0; p < n; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = out.data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double s = 0.0;
        for (std::size_t a = 0; a < size; ++a) {
          for (std::size_t b = 0; b < size; ++b) s += src[(i * size + a) * w + j * size + b];
        }
        dst[i * ow + j] = s * inv;
      }
    }
  }
  return out;
}

inline Tensor avg_pool_backward(const Shape& input_shape, const Tensor& upstream, std::size_t size = 2) {
  const std::size_t n = input_shape[0] * input_shape[1], h = input_shape[2], w = input_shape[3];
  const std::size_t oh = h / size, ow = w / size;
  if (upstream.shape() != Shape{input_shape[0], input_shape[1], oh, ow}) {
    throw ShapeError("upstream", "avg_pool upstream gradient shape mismatch");
  }
  Tensor dx(input_shape);
  const double inv = 1.0 / static_cast<double>(size * size);
  for (std::size_t p = 0; p < n; ++p) {
    const double* src = upstream.data() + p * oh * ow;
    double* dst = dx.data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) dst[i * w + j] = src[(i / size) * ow + j / size] * inv;
    }
  }
  return dx;
}

struct MaxPoolCache {
  std::vector<std::uint32_t> argmax;  // flat index into the input plane, per output
};

/// Max pooling with zero-based padding treated as -inf. Ties go to the first
/// window position in row-major order.
inline Tensor max_pool(const Tensor& x, std::size_t size, std::size_t stride, std::size_t pad,
                       MaxPoolCache* cache = nullptr) {
  detail::require_rank(x, 4, "max_pool input");
  if (size == 0 || stride == 0) throw ParameterError("max_pool window and stride must be positive");
  if (pad >= size) throw ParameterError("max_pool padding must be smaller than the window");
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (h + 2 * pad < size) throw ShapeError("height", "padded input shorter than pooling window");
  if (w + 2 * pad < size) throw ShapeError("width", "padded input narrower than pooling window");
  const std::size_t oh = (h + 2 * pad - size) / stride + 1, ow = (w + 2 * pad - size) / stride + 1;
  const std::size_t planes = x.dim(0) * x.dim(1);
  Tensor out({x.dim(0), x.dim(1), oh, ow});
  if (cache) cache->argmax.assign(out.size(), 0);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::uint32_t best_at = 0;
        for (std::size_t a = 0; a < size; ++a) {
          const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * stride + a) - static_cast<std::ptrdiff_t>(pad);
          if (r < 0 || r >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t b = 0; b < size; ++b) {
            const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(j * stride + b) - static_cast<std::ptrdiff_t>(pad);
            if (q < 0 || q >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t at = static_cast<std::size_t>(r) * w + static_cast<std::size_t>(q);
            if (src[at] > best) {
              best = src[at];
              best_at = static_cast<std::uint32_t>(at);
            }
          }
        }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = best;
        if (cache) cache->argmax[o] = best_at;
      }
    }
  }
  return out;
}

inline Tensor max_pool_backward(const Shape& input_shape, const Tensor& upstream, const MaxPoolCache& cache) {
  Tensor dx(input_shape);
  const std::size_t in_plane = input_shape[2] * input_shape[3];
  const std::size_t out_plane = upstream.dim(2) * upstream.dim(3);
  for (std::size_t o = 0; o < upstream.size(); ++o) {
    const std::size_t p = o / out_plane;
    dx[p * in_plane + cache.argmax[o]] += upstream[o];
  }
  return dx;
}

inline Tensor global_avg_pool(const Tensor& x) {
  detail::require_rank(x, 4, "global_avg_pool input");
  const std::size_t planes = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor out({x.dim(0), x.dim(1)});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * plane;
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += src[i];
    out[p] = s / static_cast<double>(plane);
  }
  return out;
}

inline Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& upstream) {
  const std::size_t plane = input_shape[2] * input_shape[3];
  if (upstream.shape() != Shape{input_shape[0], input_shape[1]}) {
    throw ShapeError("upstream", "global_avg_pool upstream gradient shape mismatch");
  }
  Tensor dx(input_shape);
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t p = 0; p < upstream.size(); ++p) {
    std::fill_n(dx.data() + p * plane, plane, upstream[p] * inv);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Fully connected: y = x W + b with W of shape (in, out).

inline Tensor dense(const Tensor& x, const Tensor& weights, std::span<const double> bias) {
  detail::require_rank(x, 2, "dense input");
  detail::require_rank(weights, 2, "dense weights");
  if (x.dim(1) != weights.dim(0)) {
    throw ShapeError("features", "input has " + std::to_string(x.dim(1)) + " features, weights expect " +
                                     std::to_string(weights.dim(0)));
  }
  if (!bias.empty() && bias.size() != weights.dim(1)) throw ShapeError("bias", "dense bias length mismatch");
  const auto n = static_cast<Eigen::Index>(x.dim(0)), f = static_cast<Eigen::Index>(x.dim(1)),
             g = static_cast<Eigen::Index>(weights.dim(1));
  Tensor out({x.dim(0), weights.dim(1)});
  detail::MatMap y(out.data(), n, g);
  y.noalias() = detail::ConstMatMap(x.data(), n, f) * detail::ConstMatMap(weights.data(), f, g);
  if (!bias.empty()) {
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index c = 0; c < g; ++c) y(r, c) += bias[static_cast<std::size_t>(c)];
    }
  }
  return out;
}

inline Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  return dense(x, weights, bias.values());
}

struct DenseGrads {
  Tensor input, weights;
  std::vector<double> bias;
};

inline DenseGrads dense_backward(const Tensor& x, const Tensor& weights, const Tensor& upstream, GradRequest want = {}) {
  const auto n = static_cast<Eigen::Index>(x.dim(0)), f = static_cast<Eigen::Index>(x.dim(1)),
             g = static_cast<Eigen::Index>(weights.dim(1));
  if (upstream.shape() != Shape{x.dim(0), weights.dim(1)}) {
    throw ShapeError("upstream", "dense upstream gradient shape mismatch");
  }
  DenseGrads grads;
  detail::ConstMatMap dy(upstream.data(), n, g);
  if (want.input) {
    grads.input = Tensor(x.shape());
    detail::MatMap(grads.input.data(), n, f).noalias() =
        dy * detail::ConstMatMap(weights.data(), f, g).transpose();
  }
  if (want.params) {
    grads.weights = Tensor(weights.shape());
    detail::MatMap(grads.weights.data(), f, g).noalias() = detail::ConstMatMap(x.data(), n, f).transpose() * dy;
    grads.bias.assign(static_cast<std::size_t>(g), 0.0);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index c = 0; c < g; ++c) grads.bias[static_cast<std::size_t>(c)] += dy(r, c);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Inverted dropout: survivors are scaled by 1/(1-rate) so eval is identity.

struct DropoutResult {
  Tensor output;
  std::vector<double> mask;  // per element scale (0 or 1/(1-rate)); empty = identity
};

inline DropoutResult dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return {x, {}};
  DropoutResult r{Tensor(x.shape()), std::vector<double>(x.size())};
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    r.output[i] = x[i] * r.mask[i];
  }
  return r;
}

inline Tensor dropout_backward(const Tensor& upstream, std::span<const double> mask) {
  if (mask.empty()) return upstream;
  Tensor dx(upstream.shape());
  for (std::size_t i = 0; i < upstream.size(); ++i) dx[i] = upstream[i] * mask[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Channel concatenation (dense connectivity) and its inverse.

inline Tensor concat_channels(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw ShapeError("channel", "concat_channels needs at least one part");
  const Tensor& first = *parts.front();
  detail::require_rank(first, 4, "concat_channels part");
  const std::size_t batch = first.dim(0), h = first.dim(2), w = first.dim(3), plane = h * w;
  std::size_t channels = 0;
  for (const Tensor* p : parts) {
    detail::require_rank(*p, 4, "concat_channels part");
    if (p->dim(0) != batch) throw ShapeError("batch", "concat_channels parts disagree on batch size");
    if (p->dim(2) != h) throw ShapeError("height", "concat_channels parts disagree on height");
    if (p->dim(3) != w) throw ShapeError("width", "concat_channels parts disagree on width");
    channels += p->dim(1);
  }
  Tensor out({batch, channels, h, w});
  for (std::size_t n = 0; n < batch; ++n) {
    double* dst = out.data() + n * channels * plane;
    for (const Tensor* p : parts) {
      const std::size_t block = p->dim(1) * plane;
      const double* src = p->data() + n * block;
      dst = std::copy(src, src + block, dst);
    }
  }
  return out;
}

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(parts.size());
  for (const Tensor& t : parts) ptrs.push_back(&t);
  return concat_channels(std::span<const Tensor* const>(ptrs));
}

inline std::vector<Tensor> split_channels(const Tensor& x, std::span<const std::size_t> channels) {
  detail::require_rank(x, 4, "split_channels input");
  std::size_t total = 0;
  for (std::size_t c : channels) total += c;
  if (total != x.dim(1)) throw ShapeError("channel", "split sizes do not sum to the channel count");
  const std::size_t batch = x.dim(0), plane = x.dim(2) * x.dim(3);
  std::vector<Tensor> parts;
  parts.reserve(channels.size());
  for (std::size_t c : channels) parts.emplace_back(Shape{batch, c, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < batch; ++n) {
    const double* src = x.data() + n * total * plane;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const std::size_t block = channels[i] * plane;
      std::copy(src, src + block, parts[i].data() + n * block);
      src += block;
    }
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Softmax and class-weighted cross-entropy.

inline Tensor softmax(const Tensor& logits) {
  detail::require_rank(logits, 2, "softmax input");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor p(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data() + i * c;
    double* out = p.data() + i * c;
    const double m = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[j] = std::exp(z[j] - m);
      s += out[j];
    }
    for (std::size_t j = 0; j < c; ++j) out[j] /= s;
  }
  return p;
}

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d loss / d logits
};

/// loss = (1/N) sum_i w[y_i] * -log softmax(z_i)[y_i]
inline LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                                        std::span<const double> class_weights) {
  detail::require_rank(logits, 2, "softmax_cross_entropy logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("batch", "label count does not match logits");
  if (class_weights.size() != c) throw ShapeError("class", "class weight count does not match logits");
  for (double w : class_weights) {
    if (!(w > 0.0)) throw ParameterError("class weights must be positive");
  }
  LossResult r{0.0, softmax(logits)};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    const double w = class_weights[static_cast<std::size_t>(y)];
    double* g = r.grad.data() + i * c;
    r.loss += w * -std::log(std::max(g[y], 1e-300));
    for (std::size_t j = 0; j < c; ++j) g[j] *= w * inv_n;
    g[y] -= w * inv_n;
  }
  r.loss *= inv_n;
  return r;
}

}  // namespace densepipe
