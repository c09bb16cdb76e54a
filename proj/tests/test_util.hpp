#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sadnet/sadnet.hpp"

namespace testutil {

using sadnet::Shape4;
using sadnet::Tensor4;

template <typename T = double>
Tensor4<T> random_tensor(const Shape4& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  sadnet::Xoshiro256 rng(seed);
  Tensor4<T> t(s);
  for (auto& v : t.vec()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return t;
}

template <typename T>
double max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (!(a.shape() == b.shape())) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

// max |a - b| / max(|b|, 1)
template <typename T>
double max_rel_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (!(a.shape() == b.shape())) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - b[i]) / std::max(std::abs(static_cast<double>(b[i])), 1.0);
    m = std::max(m, d);
  }
  return m;
}

// Direct definition: y[n,o,oy,ox] = b[o] + sum_{c,ky,kx} w[o,c,ky,kx] x[n,c,iy,ix]
// with iy = oy*s - p + ky*d, zero outside.
inline Tensor4<double> reference_conv(const Tensor4<double>& x, const Tensor4<double>& w, const Tensor4<double>* b,
                                      const sadnet::ConvGeometry& g) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const auto oh = (xs.h + 2 * g.padding.h - g.dilation.h * (ws.h - 1) - 1) / g.stride.h + 1;
  const auto ow = (xs.w + 2 * g.padding.w - g.dilation.w * (ws.w - 1) - 1) / g.stride.w + 1;
  Tensor4<double> y(Shape4{xs.n, ws.n, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b ? (*b)[o] : 0.0;
          for (std::size_t c = 0; c < xs.c; ++c)
            for (std::size_t ky = 0; ky < ws.h; ++ky)
              for (std::size_t kx = 0; kx < ws.w; ++kx) {
                const long iy = static_cast<long>(oy * g.stride.h + ky * g.dilation.h) - static_cast<long>(g.padding.h);
                const long ix = static_cast<long>(ox * g.stride.w + kx * g.dilation.w) - static_cast<long>(g.padding.w);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs.h) || ix >= static_cast<long>(xs.w)) continue;
                acc += w.at(o, c, ky, kx) * x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              }
          y.at(n, o, oy, ox) = acc;
        }
  return y;
}

// Scatter form of the transposed convolution: every input pixel adds its
// kernel-weighted footprint into the output. Weight layout (in, out, kh, kw).
inline Tensor4<double> reference_conv_transpose(const Tensor4<double>& x, const Tensor4<double>& w,
                                                const Tensor4<double>* b, const sadnet::ConvGeometry& g) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const auto full_h = (xs.h - 1) * g.stride.h + g.dilation.h * (ws.h - 1) + 1;
  const auto full_w = (xs.w - 1) * g.stride.w + g.dilation.w * (ws.w - 1) + 1;
  const auto oh = full_h - 2 * g.padding.h;
  const auto ow = full_w - 2 * g.padding.w;
  Tensor4<double> y(Shape4{xs.n, ws.c, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.c; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) y.at(n, o, oy, ox) = b ? (*b)[o] : 0.0;
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t iy = 0; iy < xs.h; ++iy)
        for (std::size_t ix = 0; ix < xs.w; ++ix)
          for (std::size_t o = 0; o < ws.c; ++o)
            for (std::size_t ky = 0; ky < ws.h; ++ky)
              for (std::size_t kx = 0; kx < ws.w; ++kx) {
                const long oy = static_cast<long>(iy * g.stride.h + ky * g.dilation.h) - static_cast<long>(g.padding.h);
                const long ox = static_cast<long>(ix * g.stride.w + kx * g.dilation.w) - static_cast<long>(g.padding.w);
                if (oy < 0 || ox < 0 || oy >= static_cast<long>(oh) || ox >= static_cast<long>(ow)) continue;
                y.at(n, o, static_cast<std::size_t>(oy), static_cast<std::size_t>(ox)) +=
                    x.at(n, c, iy, ix) * w.at(c, o, ky, kx);
              }
  return y;
}

// Textbook bilinear interpolation with zero outside the image.
inline double reference_bilinear(const Tensor4<double>& f, double y, double x, std::size_t n, std::size_t c) {
  const auto& s = f.shape();
  const double y0 = std::floor(y);
  const double x0 = std::floor(x);
  auto pix = [&](double yy, double xx) {
    if (yy < 0 || xx < 0 || yy > static_cast<double>(s.h) - 1 || xx > static_cast<double>(s.w) - 1) return 0.0;
    return f.at(n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
  };
  const double ly = y - y0;
  const double lx = x - x0;
  return (1 - ly) * (1 - lx) * pix(y0, x0) + (1 - ly) * lx * pix(y0, x0 + 1) + ly * (1 - lx) * pix(y0 + 1, x0) +
         ly * lx * pix(y0 + 1, x0 + 1);
}

// Per-pixel evaluation of y(p) = b + sum_k w_k x(p + p_k + dp_k) m_k for a
// stride-1, "same"-padded kernel.
inline Tensor4<double> reference_deform_conv(const Tensor4<double>& x, const Tensor4<double>& w,
                                             const Tensor4<double>* b, const Tensor4<double>& off,
                                             const Tensor4<double>& mask) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const long r = static_cast<long>(ws.h / 2);
  Tensor4<double> y(Shape4{xs.n, ws.n, xs.h, xs.w});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o)
      for (std::size_t py = 0; py < xs.h; ++py)
        for (std::size_t px = 0; px < xs.w; ++px) {
          double acc = b ? (*b)[o] : 0.0;
          for (std::size_t ky = 0; ky < ws.h; ++ky)
            for (std::size_t kx = 0; kx < ws.w; ++kx) {
              const std::size_t k = ky * ws.w + kx;
              const double sy = static_cast<double>(py) + static_cast<double>(static_cast<long>(ky) - r) +
                                off.at(n, 2 * k, py, px);
              const double sx = static_cast<double>(px) + static_cast<double>(static_cast<long>(kx) - r) +
                                off.at(n, 2 * k + 1, py, px);
              for (std::size_t c = 0; c < xs.c; ++c) {
                acc += w.at(o, c, ky, kx) * reference_bilinear(x, sy, sx, n, c) * mask.at(n, k, py, px);
              }
            }
          y.at(n, o, py, px) = acc;
        }
  return y;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sadnet_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline sadnet::ImageBuffer random_image(std::size_t w, std::size_t h, std::size_t c, std::uint64_t seed) {
  sadnet::Xoshiro256 rng(seed);
  sadnet::ImageBuffer img(w, h, c);
  for (auto& v : img.samples) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

// Direct 2-D window sums at every valid position, channel by channel.
inline double naive_ssim(const sadnet::ImageBuffer& a, const sadnet::ImageBuffer& b) {
  const auto g = sadnet::ssim_gaussian();
  const std::size_t win = g.size();
  double total = 0.0;
  for (std::size_t c = 0; c < a.channels; ++c) {
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t y = 0; y + win <= a.height; ++y)
      for (std::size_t x = 0; x + win <= a.width; ++x) {
        double ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
        for (std::size_t i = 0; i < win; ++i)
          for (std::size_t j = 0; j < win; ++j) {
            const double w = g[i] * g[j];
            const double va = a.at(y + i, x + j, c);
            const double vb = b.at(y + i, x + j, c);
            ma += w * va;
            mb += w * vb;
            aa += w * va * va;
            bb += w * vb * vb;
            ab += w * va * vb;
          }
        const double c1 = 6.5025, c2 = 58.5225;
        const double va = aa - ma * ma, vb = bb - mb * mb, cov = ab - ma * mb;
        acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++n;
      }
    total += acc / static_cast<double>(n);
  }
  return total / static_cast<double>(a.channels);
}

inline double naive_psnr(const sadnet::ImageBuffer& a, const sadnet::ImageBuffer& b) {
  double se = 0.0;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const double d = double(a.samples[i]) - double(b.samples[i]);
    se += d * d;
  }
  return 10.0 * std::log10(255.0 * 255.0 * static_cast<double>(a.samples.size()) / se);
}

}  // namespace testutil
