#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sadnet/error.hpp"
#include "sadnet/tensor.hpp"

namespace sadnet {

// 8-bit raster, samples interleaved (y, x, channel).
struct ImageBuffer {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> samples;

  ImageBuffer() = default;
  ImageBuffer(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), samples(w * h * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return samples[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return samples[(y * width + x) * channels + c];
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;
};

namespace detail {

class PnmReader {
 public:
  PnmReader(const std::vector<std::uint8_t>& bytes, std::size_t start) : bytes_(bytes), pos_(start) {}

  std::size_t pos() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = static_cast<char>(bytes_[pos_]);
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > (std::size_t{1} << 31)) throw ParseError(std::string("header ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError(std::string("expected ") + what + " in header", start);
    return value;
  }

  void expect_single_whitespace() {
    if (pos_ >= bytes_.size()) throw ParseError("truncated header", pos_);
    const char c = static_cast<char>(bytes_[pos_]);
    if (c != ' ' && c != '\t' && c != '\n' && c != '\r') throw ParseError("expected whitespace after maxval", pos_);
    ++pos_;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Binary PGM (P5, grayscale) or PPM (P6, RGB), maxval 255.
inline ImageBuffer decode_pnm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ParseError("not a binary PGM/PPM file (expected magic P5 or P6)", 0);
  }
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  detail::PnmReader body(bytes, 2);
  const std::size_t width = body.read_uint("width");
  const std::size_t height = body.read_uint("height");
  const std::size_t maxval_pos = body.pos();
  const std::size_t maxval = body.read_uint("maxval");
  if (width == 0 || height == 0) throw ParseError("image dimensions must be positive", maxval_pos);
  if (maxval != 255) throw ParseError("unsupported maxval " + std::to_string(maxval) + " (only 255)", maxval_pos);
  body.expect_single_whitespace();
  const std::size_t data_start = body.pos();
  const std::size_t need = width * height * channels;
  if (bytes.size() - data_start < need) {
    throw ParseError("truncated payload: need " + std::to_string(need) + " bytes, have " +
                         std::to_string(bytes.size() - data_start),
                     bytes.size());
  }
  ImageBuffer img(width, height, channels);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(data_start),
            bytes.begin() + static_cast<std::ptrdiff_t>(data_start + need), img.samples.begin());
  return img;
}

inline std::vector<std::uint8_t> encode_pnm(const ImageBuffer& img) {
  if (img.channels != 1 && img.channels != 3) throw UsageError("PNM output supports 1 or 3 channels");
  const std::string header =
      std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
      std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.samples.begin(), img.samples.end());
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

inline ImageBuffer load_image(const std::filesystem::path& path) {
  try {
    return decode_pnm(read_file_bytes(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.detail(), e.offset());
  }
}

inline void save_image(const ImageBuffer& img, const std::filesystem::path& path) {
  write_file_bytes(path, encode_pnm(img));
}

// [0, 255] -> [0, 1]
inline double dequantize(std::uint8_t v) { return static_cast<double>(v) / 255.0; }

// [0, 1] -> [0, 255], clipped, round half up.
inline std::uint8_t quantize(double v) {
  const double scaled = std::floor(v * 255.0 + 0.5);
  if (!(scaled > 0.0)) return 0;  // also maps NaN to 0
  if (scaled >= 255.0) return 255;
  return static_cast<std::uint8_t>(scaled);
}

template <typename T>
Tensor4<T> image_to_tensor(const ImageBuffer& img) {
  Tensor4<T> t(Shape4{1, img.channels, img.height, img.width});
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) t.at(0, c, y, x) = static_cast<T>(dequantize(img.at(y, x, c)));
  return t;
}

template <typename T>
ImageBuffer tensor_to_image(const Tensor4<T>& t, std::size_t batch = 0) {
  const auto& s = t.shape();
  ImageBuffer img(s.w, s.h, s.c);
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) img.at(y, x, c) = quantize(static_cast<double>(t.at(batch, c, y, x)));
  return img;
}

namespace detail {

// Mirror index without repeating the edge: -1 -> 1, n -> n - 2.
inline std::size_t reflect_index(std::int64_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::int64_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::int64_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

}  // namespace detail

// Reflect-pads on the bottom/right edges up to (height, width).
template <typename T>
Tensor4<T> reflect_pad(const Tensor4<T>& x, std::size_t height, std::size_t width) {
  const auto& s = x.shape();
  Tensor4<T> out(Shape4{s.n, s.c, height, width});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < height; ++y) {
        const std::size_t sy = detail::reflect_index(static_cast<std::int64_t>(y), s.h);
        for (std::size_t xx = 0; xx < width; ++xx) {
          out.at(n, c, y, xx) = x.at(n, c, sy, detail::reflect_index(static_cast<std::int64_t>(xx), s.w));
        }
      }
  return out;
}

template <typename T>
Tensor4<T> crop(const Tensor4<T>& x, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  const auto& s = x.shape();
  if (top + height > s.h || left + width > s.w) throw UsageError("crop window outside tensor " + s.str());
  Tensor4<T> out(Shape4{s.n, s.c, height, width});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t xx = 0; xx < width; ++xx) out.at(n, c, y, xx) = x.at(n, c, top + y, left + xx);
  return out;
}

}  // namespace sadnet
