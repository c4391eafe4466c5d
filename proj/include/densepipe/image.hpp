#pragma once

// Grayscale image I/O (binary PGM, PNG) and preprocessing: global histogram
// equalization and aspect-preserving letterbox resize.

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "densepipe/error.hpp"
#include "densepipe/tensor.hpp"

namespace densepipe {

struct ImageGray {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  ImageGray() = default;
  ImageGray(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  friend bool operator==(const ImageGray&, const ImageGray&) = default;
};

struct ImageRgb {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major

  ImageRgb() = default;
  ImageRgb(std::size_t w, std::size_t h) : width(w), height(h), pixels(w * h * 3, 0) {}

  std::array<std::uint8_t, 3> at(std::size_t x, std::size_t y) const {
    const std::size_t i = (y * width + x) * 3;
    return {pixels[i], pixels[i + 1], pixels[i + 2]};
  }
  void set(std::size_t x, std::size_t y, std::array<std::uint8_t, 3> c) {
    const std::size_t i = (y * width + x) * 3;
    pixels[i] = c[0];
    pixels[i + 1] = c[1];
    pixels[i + 2] = c[2];
  }
};

namespace detail {

inline constexpr std::size_t kMaxPixels = std::size_t{1} << 28;

inline void check_dimensions(std::uint64_t w, std::uint64_t h) {
  if (w == 0 || h == 0) throw FormatError("image has a zero dimension");
  if (w > kMaxPixels || h > kMaxPixels || w * h > kMaxPixels) {
    throw FormatError("image dimensions " + std::to_string(w) + "x" + std::to_string(h) + " overflow the pixel limit");
  }
}

/// v * 255 / maxval, rounded half-up.
inline std::uint8_t rescale_to_8bit(std::uint32_t v, std::uint32_t maxval) {
  if (v > maxval) v = maxval;
  return static_cast<std::uint8_t>((2ull * v * 255 + maxval) / (2ull * maxval));
}

inline std::uint8_t luma(std::uint32_t r, std::uint32_t g, std::uint32_t b) {
  return static_cast<std::uint8_t>(std::lround(0.299 * r + 0.587 * g + 0.114 * b));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace detail

/// Binary PGM (P5), maxval 1..65535; samples wider than 8 bits are big-endian.
inline ImageGray decode_pgm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("not a binary PGM (P5) image");
  std::size_t pos = 2;
  const auto skip_space = [&] {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto number = [&]() -> std::uint64_t {
    skip_space();
    if (pos >= bytes.size()) throw FormatError("truncated PGM header");
    if (bytes[pos] < '0' || bytes[pos] > '9') throw FormatError("malformed PGM header");
    std::uint64_t v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + static_cast<std::uint64_t>(bytes[pos] - '0');
      if (v > (std::uint64_t{1} << 40)) throw FormatError("PGM header value overflows");
      ++pos;
    }
    return v;
  };
  const std::uint64_t w = number();
  const std::uint64_t h = number();
  const std::uint64_t maxval = number();
  detail::check_dimensions(w, h);
  if (maxval == 0 || maxval > 65535) throw FormatError("PGM maxval must lie in 1..65535");
  if (pos >= bytes.size()) throw FormatError("truncated PGM header");
  ++pos;  // single whitespace before the raster
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  const std::size_t need = static_cast<std::size_t>(w * h) * bytes_per;
  if (bytes.size() - pos < need) throw FormatError("truncated PGM raster");
  ImageGray img(static_cast<std::size_t>(w), static_cast<std::size_t>(h));
  const auto* raster = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const std::uint32_t v = bytes_per == 2 ? (std::uint32_t{raster[2 * i]} << 8) | raster[2 * i + 1] : raster[i];
    img.pixels[i] = detail::rescale_to_8bit(v, static_cast<std::uint32_t>(maxval));
  }
  return img;
}

inline std::string encode_pgm(const ImageGray& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

namespace detail {

struct PngMemory {
  std::string_view bytes;
  std::size_t pos = 0;
};

inline void png_read_memory(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<PngMemory*>(png_get_io_ptr(png));
  if (src->bytes.size() - src->pos < n) png_error(png, "truncated PNG payload");
  std::memcpy(out, src->bytes.data() + src->pos, n);
  src->pos += n;
}

inline void png_error_handler(png_structp png, png_const_charp msg) {
  auto* message = static_cast<std::string*>(png_get_error_ptr(png));
  if (message) *message = msg;
  png_longjmp(png, 1);
}

inline void png_warning_handler(png_structp, png_const_charp) {}

}  // namespace detail

/// 8- or 16-bit PNG. Colour is converted with 0.299R + 0.587G + 0.114B;
/// alpha is ignored; 16-bit samples are rescaled to 8 bits.
inline ImageGray decode_png(std::string_view bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw FormatError("not a PNG image");
  }
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, detail::png_error_handler,
                                           detail::png_warning_handler);
  if (!png) throw FormatError("cannot initialise PNG decoder");
  png_infop info = png_create_info_struct(png);
  detail::PngMemory src{bytes, 0};
  ImageGray img;
  std::vector<png_byte> raster;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    if (message.find("truncated") != std::string::npos) throw FormatError("truncated PNG payload");
    throw FormatError("invalid PNG: " + message);
  }
  png_set_read_fn(png, &src, detail::png_read_memory);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (w == 0 || h == 0 || std::uint64_t{w} * h > detail::kMaxPixels) png_error(png, "dimension overflow");
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  const int out_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raster.resize(rowbytes * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = raster.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  img = ImageGray(w, h);
  const std::size_t bps = out_depth == 16 ? 2 : 1;
  const auto sample = [&](std::size_t y, std::size_t x, int c) -> std::uint8_t {
    const png_byte* p = raster.data() + y * rowbytes + (x * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)) * bps;
    if (bps == 2) return detail::rescale_to_8bit((std::uint32_t{p[0]} << 8) | p[1], 65535);
    return p[0];
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      img.at(x, y) = channels >= 3 ? detail::luma(sample(y, x, 0), sample(y, x, 1), sample(y, x, 2)) : sample(y, x, 0);
    }
  }
  return img;
}

inline ImageGray decode_image(std::string_view bytes) {
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return decode_pgm(bytes);
  if (bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0) {
    return decode_png(bytes);
  }
  throw FormatError("unknown image format (expected binary PGM or PNG)");
}

inline ImageGray load_image(const std::filesystem::path& path) {
  try {
    return decode_image(detail::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void save_pgm(const ImageGray& img, const std::filesystem::path& path) {
  const std::string bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline void save_ppm(const ImageRgb& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline void save_png(const ImageRgb& img, const std::filesystem::path& path) {
  png_image desc;
  std::memset(&desc, 0, sizeof desc);
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(img.width);
  desc.height = static_cast<png_uint_32>(img.height);
  desc.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&desc, path.string().c_str(), 0, img.pixels.data(),
                               static_cast<png_int_32>(img.width * 3), nullptr)) {
    const std::string why = desc.message;
    png_image_free(&desc);
    throw IoError("failed writing PNG '" + path.string() + "': " + why);
  }
}

// ---------------------------------------------------------------------------

/// Global CDF remap: h(v) = round((cdf(v) - cdf_min) / (M*N - cdf_min) * 255),
/// cdf_min being the smallest nonzero CDF value. Single-intensity images are
/// returned unchanged.
inline ImageGray hist_equalize(const ImageGray& img) {
  std::array<std::size_t, 256> hist{};
  for (std::uint8_t p : img.pixels) ++hist[p];
  std::array<std::size_t, 256> cdf{};
  std::size_t running = 0, cdf_min = 0;
  for (std::size_t v = 0; v < 256; ++v) {
    running += hist[v];
    cdf[v] = running;
    if (cdf_min == 0 && running > 0) cdf_min = running;
  }
  const std::size_t total = img.pixels.size();
  if (total == 0 || cdf_min == total) return img;
  std::array<std::uint8_t, 256> lut{};
  const double denom = static_cast<double>(total - cdf_min);
  for (std::size_t v = 0; v < 256; ++v) {
    const double num = cdf[v] >= cdf_min ? static_cast<double>(cdf[v] - cdf_min) : 0.0;
    lut[v] = static_cast<std::uint8_t>(std::clamp<long>(std::lround(num / denom * 255.0), 0, 255));
  }
  ImageGray out = img;
  for (std::uint8_t& p : out.pixels) p = lut[p];
  return out;
}

struct LetterboxGeometry {
  std::size_t size = 0;            // S
  std::size_t content_w = 0, content_h = 0;
  std::size_t pad_left = 0, pad_top = 0;
  std::size_t pad_right = 0, pad_bottom = 0;
};

/// scale = S / max(w, h); content is round(w*scale) x round(h*scale), centred;
/// an odd leftover row/column of padding goes after the content.
inline LetterboxGeometry letterbox_geometry(std::size_t width, std::size_t height, std::size_t size) {
  if (size < 1) throw ParameterError("letterbox target size must be positive");
  if (width == 0 || height == 0) throw ParameterError("letterbox source must be non-empty");
  const double scale = static_cast<double>(size) / static_cast<double>(std::max(width, height));
  LetterboxGeometry g;
  g.size = size;
  g.content_w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(static_cast<double>(width) * scale)), 1, size);
  g.content_h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(static_cast<double>(height) * scale)), 1, size);
  g.pad_left = (size - g.content_w) / 2;
  g.pad_right = size - g.content_w - g.pad_left;
  g.pad_top = (size - g.content_h) / 2;
  g.pad_bottom = size - g.content_h - g.pad_top;
  return g;
}

/// Bilinear resample with pixel-centre alignment and edge clamping.
inline ImageGray resize_bilinear(const ImageGray& img, std::size_t out_w, std::size_t out_h) {
  ImageGray out(out_w, out_h);
  if (out_w == img.width && out_h == img.height) return img;
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double tx = fx - static_cast<double>(x0);
      const double top = img.at(x0, y0) * (1.0 - tx) + img.at(x1, y0) * tx;
      const double bottom = img.at(x0, y1) * (1.0 - tx) + img.at(x1, y1) * tx;
      out.at(x, y) = static_cast<std::uint8_t>(std::clamp<long>(std::lround(top * (1.0 - ty) + bottom * ty), 0, 255));
    }
  }
  return out;
}

inline ImageGray resize_letterbox(const ImageGray& img, std::size_t size) {
  const LetterboxGeometry g = letterbox_geometry(img.width, img.height, size);
  const ImageGray content = resize_bilinear(img, g.content_w, g.content_h);
  ImageGray out(size, size, 0);
  for (std::size_t y = 0; y < g.content_h; ++y) {
    std::copy_n(content.pixels.begin() + static_cast<std::ptrdiff_t>(y * g.content_w), g.content_w,
                out.pixels.begin() + static_cast<std::ptrdiff_t>((y + g.pad_top) * size + g.pad_left));
  }
  return out;
}

/// Square image to a (C, S, S) tensor with intensities v / 255; C = 3
/// replicates the plane.
inline Tensor to_tensor(const ImageGray& img, std::size_t channels = 1) {
  if (img.width != img.height) {
    throw ShapeError("width", "to_tensor needs a square image, got " + std::to_string(img.width) + "x" +
                                  std::to_string(img.height));
  }
  if (channels != 1 && channels != 3) throw ParameterError("to_tensor supports 1 or 3 channels");
  const std::size_t plane = img.pixels.size();
  Tensor t({channels, img.height, img.width});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) t[c * plane + i] = img.pixels[i] / 255.0;
  }
  return t;
}

}  // namespace densepipe
