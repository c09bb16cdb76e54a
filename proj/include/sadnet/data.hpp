#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sadnet/error.hpp"
#include "sadnet/image.hpp"
#include "sadnet/rng.hpp"
#include "sadnet/tensor.hpp"

namespace sadnet {

// Gaussian noise level on the [0, 255] scale plus the seed of its stream.
struct NoiseSpec {
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

// x + n with n ~ N(0, (sigma/255)^2) i.i.d., drawn from xoshiro256** via
// Box-Muller in flat element order (pairs of elements share one transform).
// Not clipped.
template <typename T>
Tensor4<T> add_awgn(const Tensor4<T>& image, const NoiseSpec& spec) {
  if (!(spec.sigma >= 0.0) || !std::isfinite(spec.sigma)) {
    throw UsageError("add_awgn: sigma must be finite and >= 0, got " + std::to_string(spec.sigma));
  }
  Tensor4<T> out = image;
  if (spec.sigma == 0.0) return out;
  const double std_dev = spec.sigma / 255.0;
  Xoshiro256 rng(spec.seed);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; i += 2) {
    const auto z = rng.normal_pair();
    out[i] = static_cast<T>(static_cast<double>(out[i]) + std_dev * z[0]);
    if (i + 1 < n) out[i + 1] = static_cast<T>(static_cast<double>(out[i + 1]) + std_dev * z[1]);
  }
  return out;
}

struct PatchCorner {
  std::size_t top = 0;
  std::size_t left = 0;
};

// Uniform top-left corners over the valid range, reproducible by seed.
inline std::vector<PatchCorner> patch_corners(std::size_t height, std::size_t width, std::size_t size,
                                              std::size_t count, std::uint64_t seed) {
  if (size == 0) throw UsageError("extract_patches: patch size must be positive");
  if (height < size || width < size) {
    throw UsageError("extract_patches: image " + std::to_string(height) + "x" + std::to_string(width) +
                     " is smaller than the patch size " + std::to_string(size));
  }
  Xoshiro256 rng(seed);
  std::vector<PatchCorner> corners;
  corners.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t top = rng.below(height - size + 1);
    const std::size_t left = rng.below(width - size + 1);
    corners.push_back({top, left});
  }
  return corners;
}

template <typename T>
std::vector<Tensor4<T>> extract_patches(const Tensor4<T>& image, std::size_t size, std::size_t count,
                                        std::uint64_t seed) {
  const auto& s = image.shape();
  std::vector<Tensor4<T>> patches;
  for (const auto& c : patch_corners(s.h, s.w, size, count, seed)) {
    Tensor4<T> p(Shape4{1, s.c, size, size});
    for (std::size_t ch = 0; ch < s.c; ++ch)
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) p.at(0, ch, y, x) = image.at(0, ch, c.top + y, c.left + x);
    patches.push_back(std::move(p));
  }
  return patches;
}

// Dihedral transform: code = rotations + 4 * flip, i.e. rotate by
// 90 degrees counter-clockwise (code % 4) times, then mirror left-right when
// code >= 4. Codes 1-3 and 5-7 rotate and need a square patch.
template <typename T>
Tensor4<T> augment(const Tensor4<T>& patch, unsigned code) {
  if (code > 7) throw UsageError("augment: code must be in 0..7, got " + std::to_string(code));
  const auto& s = patch.shape();
  const unsigned rot = code % 4;
  const bool flip = code >= 4;
  if (rot != 0 && s.h != s.w) {
    throw UsageError("augment: rotation code " + std::to_string(code) + " needs a square patch, got " + s.str());
  }
  Tensor4<T> out(s);
  const std::size_t H = s.h;
  const std::size_t W = s.w;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          // Position in the rotated image before mirroring.
          const std::size_t rx = flip ? W - 1 - x : x;
          std::size_t sy = y;
          std::size_t sx = rx;
          for (unsigned r = 0; r < rot; ++r) {
            // inverse of one CCW turn: out(y, x) = in(x, N - 1 - y)
            const std::size_t ny = sx;
            const std::size_t nx = H - 1 - sy;
            sy = ny;
            sx = nx;
          }
          out.at(n, c, y, x) = patch.at(n, c, sy, sx);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus manifest: clean_path<TAB>noisy_path<TAB>sigma<TAB>seed per line.

struct ManifestEntry {
  std::filesystem::path clean;
  std::filesystem::path noisy;
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 4) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields, got " +
                      std::to_string(fields.size()));
    }
    ManifestEntry e;
    e.clean = resolve(fields[0]);
    e.noisy = resolve(fields[1]);
    try {
      std::size_t used = 0;
      e.sigma = std::stod(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("trailing characters");
      e.seed = std::stoull(fields[3], &used);
      if (used != fields[3].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad sigma or seed field");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

inline std::string format_manifest_line(const ManifestEntry& e) {
  std::ostringstream os;
  os << e.clean.string() << '\t' << e.noisy.string() << '\t' << e.sigma << '\t' << e.seed;
  return os.str();
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw DataError("cannot open manifest '" + path.string() + "' for writing");
  for (const auto& e : entries) out << format_manifest_line(e) << '\n';
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------

// Piecewise-smooth test scene: a gradient background with overlapping discs,
// rectangles and one striped region. Stands in for natural images in demos
// and desk-scale training.
inline ImageBuffer synthetic_scene(std::size_t width, std::size_t height, std::size_t channels, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  std::vector<double> canvas(width * height * channels);
  auto color = [&](std::vector<double>& c) {
    for (auto& v : c) v = 0.1 + 0.8 * rng.uniform();
  };
  std::vector<double> base(channels), slope_y(channels), slope_x(channels);
  color(base);
  for (std::size_t c = 0; c < channels; ++c) {
    slope_y[c] = (rng.uniform() - 0.5) * 0.4;
    slope_x[c] = (rng.uniform() - 0.5) * 0.4;
  }
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        canvas[(y * width + x) * channels + c] = base[c] + slope_y[c] * (static_cast<double>(y) / height - 0.5) +
                                                  slope_x[c] * (static_cast<double>(x) / width - 0.5);
      }

  const std::size_t shapes = 4 + rng.below(4);
  std::vector<double> fill(channels);
  for (std::size_t i = 0; i < shapes; ++i) {
    color(fill);
    const double cy = rng.uniform() * height;
    const double cx = rng.uniform() * width;
    const double ry = (0.1 + 0.25 * rng.uniform()) * height;
    const double rx = (0.1 + 0.25 * rng.uniform()) * width;
    const std::uint64_t kind = rng.below(3);
    const double freq = 0.3 + 0.5 * rng.uniform();
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double dy = (static_cast<double>(y) - cy) / ry;
        const double dx = (static_cast<double>(x) - cx) / rx;
        bool inside = false;
        double shade = 1.0;
        if (kind == 0) {
          inside = dy * dy + dx * dx <= 1.0;
        } else if (kind == 1) {
          inside = std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        } else {
          inside = std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
          shade = 0.75 + 0.25 * std::sin(freq * static_cast<double>(x + y));
        }
        if (!inside) continue;
        for (std::size_t c = 0; c < channels; ++c) canvas[(y * width + x) * channels + c] = fill[c] * shade;
      }
    }
  }
  ImageBuffer img(width, height, channels);
  for (std::size_t i = 0; i < canvas.size(); ++i) img.samples[i] = quantize(canvas[i]);
  return img;
}

}  // namespace sadnet
