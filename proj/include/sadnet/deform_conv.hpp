#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sadnet/error.hpp"
#include "sadnet/gemm.hpp"
#include "sadnet/ops.hpp"
#include "sadnet/parallel.hpp"
#include "sadnet/tape.hpp"
#include "sadnet/tensor.hpp"

namespace sadnet {

// Bilinear interpolation over the four integer pixels surrounding (y, x).
// Pixels outside the plane read as zero, so the function is total. At exact
// integer coordinates the corner at floor(coord) carries full weight and the
// coordinate derivative is the forward difference towards floor(coord) + 1.
template <typename T>
struct BilinearPoint {
  std::int64_t y0 = 0;
  std::int64_t x0 = 0;
  T ly = T(0);
  T lx = T(0);
  bool outside = true;  // no corner can be inside the plane

  BilinearPoint(T y, T x, std::size_t height, std::size_t width) {
    if (!std::isfinite(y) || !std::isfinite(x)) return;
    if (y < T(-1) || x < T(-1) || y >= static_cast<T>(height) || x >= static_cast<T>(width)) return;
    const T fy = std::floor(y);
    const T fx = std::floor(x);
    y0 = static_cast<std::int64_t>(fy);
    x0 = static_cast<std::int64_t>(fx);
    ly = y - fy;
    lx = x - fx;
    outside = false;
  }
};

namespace detail {

template <typename T>
struct Corners {
  T v00 = T(0), v01 = T(0), v10 = T(0), v11 = T(0);
};

template <typename T>
Corners<T> corners(const T* plane, std::size_t height, std::size_t width, const BilinearPoint<T>& p) {
  Corners<T> c;
  const auto h = static_cast<std::int64_t>(height);
  const auto w = static_cast<std::int64_t>(width);
  const bool y0in = p.y0 >= 0 && p.y0 < h;
  const bool y1in = p.y0 + 1 >= 0 && p.y0 + 1 < h;
  const bool x0in = p.x0 >= 0 && p.x0 < w;
  const bool x1in = p.x0 + 1 >= 0 && p.x0 + 1 < w;
  if (y0in && x0in) c.v00 = plane[p.y0 * w + p.x0];
  if (y0in && x1in) c.v01 = plane[p.y0 * w + p.x0 + 1];
  if (y1in && x0in) c.v10 = plane[(p.y0 + 1) * w + p.x0];
  if (y1in && x1in) c.v11 = plane[(p.y0 + 1) * w + p.x0 + 1];
  return c;
}

template <typename T>
T interpolate(const Corners<T>& c, const BilinearPoint<T>& p) {
  return (T(1) - p.ly) * (T(1) - p.lx) * c.v00 + (T(1) - p.ly) * p.lx * c.v01 + p.ly * (T(1) - p.lx) * c.v10 +
         p.ly * p.lx * c.v11;
}

template <typename T>
T interpolate_dy(const Corners<T>& c, const BilinearPoint<T>& p) {
  return (T(1) - p.lx) * (c.v10 - c.v00) + p.lx * (c.v11 - c.v01);
}

template <typename T>
T interpolate_dx(const Corners<T>& c, const BilinearPoint<T>& p) {
  return (T(1) - p.ly) * (c.v01 - c.v00) + p.ly * (c.v11 - c.v10);
}

// plane += g * d(value)/d(pixel) for the four corners.
template <typename T>
void scatter(T* plane, std::size_t height, std::size_t width, const BilinearPoint<T>& p, T g) {
  const auto h = static_cast<std::int64_t>(height);
  const auto w = static_cast<std::int64_t>(width);
  const bool y0in = p.y0 >= 0 && p.y0 < h;
  const bool y1in = p.y0 + 1 >= 0 && p.y0 + 1 < h;
  const bool x0in = p.x0 >= 0 && p.x0 < w;
  const bool x1in = p.x0 + 1 >= 0 && p.x0 + 1 < w;
  if (y0in && x0in) plane[p.y0 * w + p.x0] += g * (T(1) - p.ly) * (T(1) - p.lx);
  if (y0in && x1in) plane[p.y0 * w + p.x0 + 1] += g * (T(1) - p.ly) * p.lx;
  if (y1in && x0in) plane[(p.y0 + 1) * w + p.x0] += g * p.ly * (T(1) - p.lx);
  if (y1in && x1in) plane[(p.y0 + 1) * w + p.x0 + 1] += g * p.ly * p.lx;
}

}  // namespace detail

template <typename T>
T bilinear_sample(const Tensor4<T>& feature, double y, double x, std::size_t batch, std::size_t channel) {
  const auto& s = feature.shape();
  const BilinearPoint<T> p(static_cast<T>(y), static_cast<T>(x), s.h, s.w);
  if (p.outside) return T(0);
  return detail::interpolate(detail::corners(feature.plane(batch, channel), s.h, s.w, p), p);
}

template <typename T>
struct BilinearSampleGrad {
  T value = T(0);
  T d_y = T(0);
  T d_x = T(0);
};

// Value and coordinate derivatives. The derivative with respect to the
// pixels is the bilinear weight of each corner (see detail::scatter).
template <typename T>
BilinearSampleGrad<T> bilinear_sample_grad(const Tensor4<T>& feature, double y, double x, std::size_t batch,
                                           std::size_t channel) {
  const auto& s = feature.shape();
  const BilinearPoint<T> p(static_cast<T>(y), static_cast<T>(x), s.h, s.w);
  if (p.outside) return {};
  const auto c = detail::corners(feature.plane(batch, channel), s.h, s.w, p);
  return {detail::interpolate(c, p), detail::interpolate_dy(c, p), detail::interpolate_dx(c, p)};
}

namespace detail {

struct DeformLayout {
  std::size_t channels, height, width;  // input
  std::size_t kh, kw, out_h, out_w;
  ConvGeometry geometry;

  std::size_t taps() const { return kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
};

// Sampling points for one sample: entry k * positions + pos.
template <typename T>
std::vector<BilinearPoint<T>> deform_points(const DeformLayout& L, const T* offsets) {
  std::vector<BilinearPoint<T>> pts;
  const std::size_t P = L.positions();
  pts.reserve(L.taps() * P);
  const auto& g = L.geometry;
  for (std::size_t ky = 0; ky < L.kh; ++ky) {
    for (std::size_t kx = 0; kx < L.kw; ++kx) {
      const std::size_t k = ky * L.kw + kx;
      const T* dy = offsets + (2 * k) * P;
      const T* dx = offsets + (2 * k + 1) * P;
      for (std::size_t oy = 0; oy < L.out_h; ++oy) {
        const T base_y = static_cast<T>(static_cast<std::int64_t>(oy * g.stride.h + ky * g.dilation.h) -
                                        static_cast<std::int64_t>(g.padding.h));
        for (std::size_t ox = 0; ox < L.out_w; ++ox) {
          const T base_x = static_cast<T>(static_cast<std::int64_t>(ox * g.stride.w + kx * g.dilation.w) -
                                          static_cast<std::int64_t>(g.padding.w));
          const std::size_t pos = oy * L.out_w + ox;
          pts.emplace_back(base_y + dy[pos], base_x + dx[pos], L.height, L.width);
        }
      }
    }
  }
  return pts;
}

// Modulated sampled columns: row (c * K + k), column pos.
template <typename T>
void deform_im2col(const DeformLayout& L, const T* img, const std::vector<BilinearPoint<T>>& pts, const T* masks,
                   T* cols) {
  const std::size_t P = L.positions();
  const std::size_t K = L.taps();
  for (std::size_t c = 0; c < L.channels; ++c) {
    const T* plane = img + c * L.height * L.width;
    for (std::size_t k = 0; k < K; ++k) {
      T* row = cols + (c * K + k) * P;
      const auto* pk = pts.data() + k * P;
      const T* mk = masks + k * P;
      for (std::size_t pos = 0; pos < P; ++pos) {
        const auto& p = pk[pos];
        row[pos] = p.outside ? T(0) : mk[pos] * interpolate(corners(plane, L.height, L.width, p), p);
      }
    }
  }
}

}  // namespace detail

// y(p) = sum_k w_k * x(p + p_k + dp_k) * m_k + b, one offset set shared by
// all input channels. Offsets: (n, 2K, out_h, out_w) with channel 2k = dy and
// 2k+1 = dx for kernel tap k in row-major order. Masks: (n, K, out_h, out_w).
template <typename T>
Var<T> modulated_deform_conv2d(const Var<T>& input, const ConvParams<T>& params, const Var<T>& offsets,
                               const Var<T>& masks) {
  const Shape4 xs = input.shape();
  const Shape4 ws = params.weight.shape();
  const auto& g = params.geometry;
  if (ws.c != xs.c) {
    throw ConfigError("modulated_deform_conv2d: input " + xs.str() + " does not match weight " + ws.str());
  }
  if (params.bias) detail::check_bias(params.bias->shape(), ws.n, "modulated_deform_conv2d");
  const std::size_t out_h = conv_output_size(xs.h, ws.h, g.stride.h, g.dilation.h, g.padding.h);
  const std::size_t out_w = conv_output_size(xs.w, ws.w, g.stride.w, g.dilation.w, g.padding.w);
  const std::size_t K = ws.h * ws.w;
  const Shape4 want_off{xs.n, 2 * K, out_h, out_w};
  const Shape4 want_mask{xs.n, K, out_h, out_w};
  if (!(offsets.shape() == want_off)) {
    throw ConfigError("modulated_deform_conv2d: offsets " + offsets.shape().str() + " expected " + want_off.str());
  }
  if (!(masks.shape() == want_mask)) {
    throw ConfigError("modulated_deform_conv2d: masks " + masks.shape().str() + " expected " + want_mask.str());
  }
  const detail::DeformLayout L{xs.c, xs.h, xs.w, ws.h, ws.w, out_h, out_w, g};
  const std::size_t P = L.positions();
  const std::size_t patch = xs.c * K;

  Tensor4<T> out(Shape4{xs.n, ws.n, out_h, out_w});
  {
    const auto& x = input.value();
    const auto& w = params.weight.value();
    const auto& off = offsets.value();
    const auto& msk = masks.value();
    parallel_for(xs.n, [&](std::size_t n) {
      const auto pts = detail::deform_points(L, off.plane(n, 0));
      std::vector<T> cols(patch * P);
      detail::deform_im2col(L, x.plane(n, 0), pts, msk.plane(n, 0), cols.data());
      detail::gemm_nn(ws.n, P, patch, w.data(), cols.data(), out.plane(n, 0), false);
    });
    if (params.bias) detail::add_bias(out, params.bias->value());
  }

  std::vector<Var<T>> inputs{input, params.weight, offsets, masks};
  if (params.bias) inputs.push_back(*params.bias);
  const std::size_t xid = input.id();
  const std::size_t wid = params.weight.id();
  const std::size_t oid = offsets.id();
  const std::size_t mid = masks.id();
  const std::optional<std::size_t> bid = params.bias ? std::optional<std::size_t>(params.bias->id()) : std::nullopt;

  return input.tape().record(
      "modulated_deform_conv2d", std::move(out), inputs, [=](Tape<T>& tape, std::size_t self) {
        const auto& gy = *tape.grad(self);
        const auto& x = tape.value(xid);
        const auto& w = tape.value(wid);
        const auto& off = tape.value(oid);
        const auto& msk = tape.value(mid);
        const bool need_x = tape.requires_grad(xid);
        const bool need_w = tape.requires_grad(wid);
        const bool need_o = tape.requires_grad(oid);
        const bool need_m = tape.requires_grad(mid);
        const bool need_cols_grad = need_x || need_o || need_m;

        Tensor4<T> gx(need_x ? xs : Shape4{});
        Tensor4<T> go(need_o ? want_off : Shape4{});
        Tensor4<T> gm(need_m ? want_mask : Shape4{});
        std::vector<std::vector<T>> gw_parts(need_w ? xs.n : 0);

        parallel_for(xs.n, [&](std::size_t n) {
          const auto pts = detail::deform_points(L, off.plane(n, 0));
          const T* mask_n = msk.plane(n, 0);
          if (need_w) {
            std::vector<T> cols(patch * P);
            detail::deform_im2col(L, x.plane(n, 0), pts, mask_n, cols.data());
            gw_parts[n].resize(ws.numel());
            detail::gemm_nt(ws.n, patch, P, gy.plane(n, 0), cols.data(), gw_parts[n].data(), false);
          }
          if (!need_cols_grad) return;
          std::vector<T> dcols(patch * P);
          detail::gemm_tn(patch, P, ws.n, w.data(), gy.plane(n, 0), dcols.data(), false);
          T* gx_n = need_x ? gx.plane(n, 0) : nullptr;
          T* go_n = need_o ? go.plane(n, 0) : nullptr;
          T* gm_n = need_m ? gm.plane(n, 0) : nullptr;
          for (std::size_t c = 0; c < xs.c; ++c) {
            const T* plane = x.plane(n, c);
            for (std::size_t k = 0; k < K; ++k) {
              const T* drow = dcols.data() + (c * K + k) * P;
              const auto* pk = pts.data() + k * P;
              const T* mk = mask_n + k * P;
              for (std::size_t pos = 0; pos < P; ++pos) {
                const auto& p = pk[pos];
                if (p.outside) continue;
                const T gcol = drow[pos];
                if (gx_n) detail::scatter(gx_n + c * xs.h * xs.w, xs.h, xs.w, p, gcol * mk[pos]);
                if (go_n || gm_n) {
                  const auto cr = detail::corners(plane, xs.h, xs.w, p);
                  if (gm_n) gm_n[k * P + pos] += gcol * detail::interpolate(cr, p);
                  if (go_n) {
                    go_n[(2 * k) * P + pos] += gcol * mk[pos] * detail::interpolate_dy(cr, p);
                    go_n[(2 * k + 1) * P + pos] += gcol * mk[pos] * detail::interpolate_dx(cr, p);
                  }
                }
              }
            }
          }
        });
        if (need_x) tape.accumulate(xid, gx);
        if (need_w) tape.accumulate(wid, detail::reduce_partials(gw_parts, ws));
        if (need_o) tape.accumulate(oid, go);
        if (need_m) tape.accumulate(mid, gm);
        if (bid && tape.requires_grad(*bid)) tape.accumulate(*bid, detail::channel_sums(gy));
      });
}

}  // namespace sadnet
