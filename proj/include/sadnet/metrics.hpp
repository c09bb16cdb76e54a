#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "sadnet/error.hpp"
#include "sadnet/image.hpp"

namespace sadnet {

namespace detail {

inline void require_same_image_shape(const ImageBuffer& a, const ImageBuffer& b, const char* op) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
    throw UsageError(std::string(op) + ": image shapes differ (" + std::to_string(a.width) + "x" +
                     std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " + std::to_string(b.width) +
                     "x" + std::to_string(b.height) + "x" + std::to_string(b.channels) + ")");
  }
}

}  // namespace detail

// 10*log10(peak^2 / MSE) over all samples; +infinity for identical images.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b, double peak = 255.0) {
  detail::require_same_image_shape(a, b, "psnr");
  if (a.samples.empty()) throw UsageError("psnr: empty images");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const double d = static_cast<double>(a.samples[i]) - static_cast<double>(b.samples[i]);
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.samples.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

struct SsimParams {
  static constexpr std::size_t window = 11;
  static constexpr double sigma = 1.5;
  static constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  static constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);
};

// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
inline std::array<double, SsimParams::window> ssim_gaussian() {
  std::array<double, SsimParams::window> g{};
  double total = 0.0;
  const double mid = (SsimParams::window - 1) / 2.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double d = static_cast<double>(i) - mid;
    g[i] = std::exp(-d * d / (2.0 * SsimParams::sigma * SsimParams::sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

inline double ssim_from_moments(double mu_a, double mu_b, double aa, double bb, double ab) {
  const double var_a = aa - mu_a * mu_a;
  const double var_b = bb - mu_b * mu_b;
  const double cov = ab - mu_a * mu_b;
  const double num = (2.0 * mu_a * mu_b + SsimParams::c1) * (2.0 * cov + SsimParams::c2);
  const double den = (mu_a * mu_a + mu_b * mu_b + SsimParams::c1) * (var_a + var_b + SsimParams::c2);
  return num / den;
}

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), valid window
// positions only, averaged over positions and then over channels.
inline double ssim(const ImageBuffer& a, const ImageBuffer& b) {
  detail::require_same_image_shape(a, b, "ssim");
  constexpr std::size_t win = SsimParams::window;
  if (a.width < win || a.height < win) {
    throw UsageError("ssim: image " + std::to_string(a.width) + "x" + std::to_string(a.height) +
                     " is smaller than the " + std::to_string(win) + "x" + std::to_string(win) + " window");
  }
  const auto g = ssim_gaussian();
  const std::size_t W = a.width;
  const std::size_t H = a.height;
  const std::size_t ow = W - win + 1;
  const std::size_t oh = H - win + 1;

  double channel_total = 0.0;
  for (std::size_t c = 0; c < a.channels; ++c) {
    // Horizontal pass over the five moment planes, then vertical.
    std::vector<std::array<double, 5>> row(H * ow);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::array<double, 5> m{};
        for (std::size_t k = 0; k < win; ++k) {
          const double va = a.at(y, x + k, c);
          const double vb = b.at(y, x + k, c);
          m[0] += g[k] * va;
          m[1] += g[k] * vb;
          m[2] += g[k] * (va * va);
          m[3] += g[k] * (vb * vb);
          m[4] += g[k] * (va * vb);
        }
        row[y * ow + x] = m;
      }
    }
    double total = 0.0;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::array<double, 5> m{};
        for (std::size_t k = 0; k < win; ++k) {
          const auto& r = row[(y + k) * ow + x];
          for (std::size_t j = 0; j < 5; ++j) m[j] += g[k] * r[j];
        }
        total += ssim_from_moments(m[0], m[1], m[2], m[3], m[4]);
      }
    }
    channel_total += total / static_cast<double>(oh * ow);
  }
  return channel_total / static_cast<double>(a.channels);
}

// Per-image PSNR/SSIM with their arithmetic means.
struct MetricReport {
  struct Row {
    std::string name;
    double psnr_db = 0.0;
    double ssim = 0.0;
  };
  std::vector<Row> rows;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  void add(std::string name, double p, double s) {
    rows.push_back(Row{std::move(name), p, s});
    double tp = 0.0;
    double ts = 0.0;
    for (const auto& r : rows) {
      tp += r.psnr_db;
      ts += r.ssim;
    }
    mean_psnr = tp / static_cast<double>(rows.size());
    mean_ssim = ts / static_cast<double>(rows.size());
  }

  static std::string format_value(double v, int precision) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
  }

  std::string tsv() const {
    std::ostringstream os;
    os << "image\tpsnr_db\tssim\n";
    for (const auto& r : rows) os << r.name << '\t' << format_value(r.psnr_db, 4) << '\t' << format_value(r.ssim, 6) << '\n';
    os << "mean\t" << format_value(mean_psnr, 4) << '\t' << format_value(mean_ssim, 6) << '\n';
    return os.str();
  }

  std::string table() const {
    std::size_t width = 5;
    for (const auto& r : rows) width = std::max(width, r.name.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(width) + 2) << "image" << std::right << std::setw(12) << "PSNR (dB)"
       << std::setw(10) << "SSIM" << '\n';
    for (const auto& r : rows) {
      os << std::left << std::setw(static_cast<int>(width) + 2) << r.name << std::right << std::setw(12)
         << format_value(r.psnr_db, 2) << std::setw(10) << format_value(r.ssim, 4) << '\n';
    }
    os << std::left << std::setw(static_cast<int>(width) + 2) << "mean" << std::right << std::setw(12)
       << format_value(mean_psnr, 2) << std::setw(10) << format_value(mean_ssim, 4) << '\n';
    return os.str();
  }
};

}  // namespace sadnet
