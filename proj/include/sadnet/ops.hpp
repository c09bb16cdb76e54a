#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sadnet/error.hpp"
#include "sadnet/gemm.hpp"
#include "sadnet/parallel.hpp"
#include "sadnet/tape.hpp"
#include "sadnet/tensor.hpp"

namespace sadnet {

struct Hw {
  std::size_t h = 0;
  std::size_t w = 0;
  friend constexpr bool operator==(const Hw&, const Hw&) = default;
};

struct ConvGeometry {
  Hw stride{1, 1};
  Hw dilation{1, 1};
  Hw padding{0, 0};

  // Padding that keeps the spatial size for stride 1.
  static ConvGeometry same(std::size_t kernel, std::size_t dilation = 1) {
    const std::size_t pad = dilation * (kernel - 1) / 2;
    return ConvGeometry{{1, 1}, {dilation, dilation}, {pad, pad}};
  }
};

// Weight layout is (out_c, in_c, k_h, k_w) for conv2d and the modulated
// deformable convolution, and (in_c, out_c, k_h, k_w) for conv2d_transpose.
// Bias, when present, has shape (1, out_c, 1, 1).
template <typename T>
struct ConvParams {
  Var<T> weight;
  std::optional<Var<T>> bias;
  ConvGeometry geometry{};
};

inline std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t dilation,
                                    std::size_t padding) {
  const std::size_t span = dilation * (kernel - 1) + 1;
  if (stride == 0 || dilation == 0 || kernel == 0) throw ConfigError("conv: stride, dilation and kernel must be >= 1");
  if (in + 2 * padding < span) {
    throw ConfigError("conv: input extent " + std::to_string(in) + " with padding " + std::to_string(padding) +
                      " is smaller than the kernel span " + std::to_string(span));
  }
  return (in + 2 * padding - span) / stride + 1;
}

inline std::size_t conv_transpose_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                              std::size_t dilation, std::size_t padding) {
  const std::size_t full = (in - 1) * stride + dilation * (kernel - 1) + 1;
  if (full <= 2 * padding) throw ConfigError("conv2d_transpose: padding leaves an empty output");
  return full - 2 * padding;
}

namespace detail {

// Unfolds one CHW sample into a (C*kh*kw) x (out_h*out_w) column matrix.
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width, std::size_t kh, std::size_t kw,
            const ConvGeometry& g, std::size_t out_h, std::size_t out_w, T* cols) {
  const std::size_t positions = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = img + c * height * width;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = cols + ((c * kh + ky) * kw + kx) * positions;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::int64_t>(oy * g.stride.h + ky * g.dilation.h) -
                          static_cast<std::int64_t>(g.padding.h);
          T* dst = row + oy * out_w;
          if (iy < 0 || iy >= static_cast<std::int64_t>(height)) {
            for (std::size_t ox = 0; ox < out_w; ++ox) dst[ox] = T(0);
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * width;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::int64_t>(ox * g.stride.w + kx * g.dilation.w) -
                            static_cast<std::int64_t>(g.padding.w);
            dst[ox] = (ix < 0 || ix >= static_cast<std::int64_t>(width)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back onto a CHW sample.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width, std::size_t kh, std::size_t kw,
            const ConvGeometry& g, std::size_t out_h, std::size_t out_w, T* img) {
  const std::size_t positions = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = img + c * height * width;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = cols + ((c * kh + ky) * kw + kx) * positions;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::int64_t>(oy * g.stride.h + ky * g.dilation.h) -
                          static_cast<std::int64_t>(g.padding.h);
          if (iy < 0 || iy >= static_cast<std::int64_t>(height)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * width;
          const T* src = row + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::int64_t>(ox * g.stride.w + kx * g.dilation.w) -
                            static_cast<std::int64_t>(g.padding.w);
            if (ix >= 0 && ix < static_cast<std::int64_t>(width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline void check_bias(const Shape4& bias, std::size_t channels, const char* op) {
  if (!(bias == Shape4{1, channels, 1, 1})) {
    throw ConfigError(std::string(op) + ": bias shape " + bias.str() + " does not match " +
                      Shape4{1, channels, 1, 1}.str());
  }
}

// Sum of gy over batch and positions, per channel, in a fixed order.
template <typename T>
Tensor4<T> channel_sums(const Tensor4<T>& gy) {
  const auto& s = gy.shape();
  Tensor4<T> out(Shape4{1, s.c, 1, 1});
  for (std::size_t c = 0; c < s.c; ++c) {
    T acc = T(0);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = gy.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
    }
    out[c] = acc;
  }
  return out;
}

template <typename T>
void add_bias(Tensor4<T>& out, const Tensor4<T>& bias) {
  const auto& s = out.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      T* p = out.plane(n, c);
      const T b = bias[c];
      for (std::size_t i = 0; i < s.plane(); ++i) p[i] += b;
    }
  }
}

// Reduces per-sample partial sums in sample order.
template <typename T>
Tensor4<T> reduce_partials(const std::vector<std::vector<T>>& parts, const Shape4& shape) {
  Tensor4<T> out(shape);
  for (const auto& part : parts) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += part[i];
  }
  return out;
}

template <typename T, typename Fwd, typename Bwd>
Var<T> unary(const char* op, const Var<T>& x, Fwd fwd, Bwd bwd) {
  const auto& xv = x.value();
  Tensor4<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xid = x.id();
  return x.tape().record(op, std::move(out), {x}, [xid, bwd](Tape<T>& tape, std::size_t self) {
    const auto& gy = *tape.grad(self);
    const auto& xv = tape.value(xid);
    const auto& yv = tape.value(self);
    Tensor4<T> gx(xv.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = gy[i] * bwd(xv[i], yv[i]);
    tape.accumulate(xid, gx);
  });
}

}  // namespace detail

// Standard convolution with zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& input, const ConvParams<T>& params) {
  const auto& xs = input.shape();
  const auto& ws = params.weight.shape();
  const auto& g = params.geometry;
  if (ws.c != xs.c) {
    throw ConfigError("conv2d: input " + xs.str() + " has " + std::to_string(xs.c) + " channels but weight " +
                      ws.str() + " expects " + std::to_string(ws.c));
  }
  if (params.bias) detail::check_bias(params.bias->shape(), ws.n, "conv2d");
  const std::size_t out_h = conv_output_size(xs.h, ws.h, g.stride.h, g.dilation.h, g.padding.h);
  const std::size_t out_w = conv_output_size(xs.w, ws.w, g.stride.w, g.dilation.w, g.padding.w);
  const std::size_t positions = out_h * out_w;
  const std::size_t patch = ws.c * ws.h * ws.w;

  Tensor4<T> out(Shape4{xs.n, ws.n, out_h, out_w});
  {
    const auto& x = input.value();
    const auto& w = params.weight.value();
    parallel_for(xs.n, [&](std::size_t n) {
      std::vector<T> cols(patch * positions);
      detail::im2col(x.plane(n, 0), xs.c, xs.h, xs.w, ws.h, ws.w, g, out_h, out_w, cols.data());
      detail::gemm_nn(ws.n, positions, patch, w.data(), cols.data(), out.plane(n, 0), false);
    });
    if (params.bias) detail::add_bias(out, params.bias->value());
  }

  std::vector<Var<T>> inputs{input, params.weight};
  if (params.bias) inputs.push_back(*params.bias);
  const std::size_t xid = input.id();
  const std::size_t wid = params.weight.id();
  const std::optional<std::size_t> bid = params.bias ? std::optional<std::size_t>(params.bias->id()) : std::nullopt;

  return input.tape().record(
      "conv2d", std::move(out), inputs, [=](Tape<T>& tape, std::size_t self) {
        const auto& gy = *tape.grad(self);
        const auto& x = tape.value(xid);
        const auto& w = tape.value(wid);
        const bool need_x = tape.requires_grad(xid);
        const bool need_w = tape.requires_grad(wid);
        Tensor4<T> gx(need_x ? xs : Shape4{});
        std::vector<std::vector<T>> gw_parts(need_w ? xs.n : 0);
        parallel_for(xs.n, [&](std::size_t n) {
          std::vector<T> cols;
          if (need_w) {
            cols.resize(patch * positions);
            detail::im2col(x.plane(n, 0), xs.c, xs.h, xs.w, ws.h, ws.w, g, out_h, out_w, cols.data());
            gw_parts[n].resize(ws.numel());
            detail::gemm_nt(ws.n, patch, positions, gy.plane(n, 0), cols.data(), gw_parts[n].data(), false);
          }
          if (need_x) {
            std::vector<T> dcols(patch * positions);
            detail::gemm_tn(patch, positions, ws.n, w.data(), gy.plane(n, 0), dcols.data(), false);
            detail::col2im(dcols.data(), xs.c, xs.h, xs.w, ws.h, ws.w, g, out_h, out_w, gx.plane(n, 0));
          }
        });
        if (need_x) tape.accumulate(xid, gx);
        if (need_w) tape.accumulate(wid, detail::reduce_partials(gw_parts, ws));
        if (bid && tape.requires_grad(*bid)) tape.accumulate(*bid, detail::channel_sums(gy));
      });
}

// Transposed convolution (the adjoint of conv2d in its input argument).
template <typename T>
Var<T> conv2d_transpose(const Var<T>& input, const ConvParams<T>& params) {
  const auto& xs = input.shape();
  const auto& ws = params.weight.shape();  // (in_c, out_c, kh, kw)
  const auto& g = params.geometry;
  if (ws.n != xs.c) {
    throw ConfigError("conv2d_transpose: input " + xs.str() + " has " + std::to_string(xs.c) +
                      " channels but weight " + ws.str() + " expects " + std::to_string(ws.n));
  }
  if (params.bias) detail::check_bias(params.bias->shape(), ws.c, "conv2d_transpose");
  const std::size_t out_h = conv_transpose_output_size(xs.h, ws.h, g.stride.h, g.dilation.h, g.padding.h);
  const std::size_t out_w = conv_transpose_output_size(xs.w, ws.w, g.stride.w, g.dilation.w, g.padding.w);
  const std::size_t positions = xs.h * xs.w;
  const std::size_t patch = ws.c * ws.h * ws.w;

  Tensor4<T> out(Shape4{xs.n, ws.c, out_h, out_w});
  {
    const auto& x = input.value();
    const auto& w = params.weight.value();
    parallel_for(xs.n, [&](std::size_t n) {
      std::vector<T> cols(patch * positions);
      detail::gemm_tn(patch, positions, ws.n, w.data(), x.plane(n, 0), cols.data(), false);
      detail::col2im(cols.data(), ws.c, out_h, out_w, ws.h, ws.w, g, xs.h, xs.w, out.plane(n, 0));
    });
    if (params.bias) detail::add_bias(out, params.bias->value());
  }

  std::vector<Var<T>> inputs{input, params.weight};
  if (params.bias) inputs.push_back(*params.bias);
  const std::size_t xid = input.id();
  const std::size_t wid = params.weight.id();
  const std::optional<std::size_t> bid = params.bias ? std::optional<std::size_t>(params.bias->id()) : std::nullopt;

  return input.tape().record(
      "conv2d_transpose", std::move(out), inputs, [=](Tape<T>& tape, std::size_t self) {
        const auto& gy = *tape.grad(self);
        const auto& x = tape.value(xid);
        const auto& w = tape.value(wid);
        const bool need_x = tape.requires_grad(xid);
        const bool need_w = tape.requires_grad(wid);
        Tensor4<T> gx(need_x ? xs : Shape4{});
        std::vector<std::vector<T>> gw_parts(need_w ? xs.n : 0);
        parallel_for(xs.n, [&](std::size_t n) {
          std::vector<T> cols(patch * positions);
          detail::im2col(gy.plane(n, 0), ws.c, out_h, out_w, ws.h, ws.w, g, xs.h, xs.w, cols.data());
          if (need_x) detail::gemm_nn(ws.n, positions, patch, w.data(), cols.data(), gx.plane(n, 0), false);
          if (need_w) {
            gw_parts[n].resize(ws.numel());
            detail::gemm_nt(ws.n, patch, positions, x.plane(n, 0), cols.data(), gw_parts[n].data(), false);
          }
        });
        if (need_x) tape.accumulate(xid, gx);
        if (need_w) tape.accumulate(wid, detail::reduce_partials(gw_parts, ws));
        if (bid && tape.requires_grad(*bid)) tape.accumulate(*bid, detail::channel_sums(gy));
      });
}

// ---------------------------------------------------------------------------
// Pointwise and structural ops

template <typename T>
Var<T> leaky_relu(const Var<T>& x, double slope) {
  const T a = static_cast<T>(slope);
  return detail::unary<T>(
      "leaky_relu", x, [a](T v) { return v >= T(0) ? v : a * v; },
      [a](T v, T) { return v >= T(0) ? T(1) : a; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> scale(const Var<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  return detail::unary<T>("scale", x, [f](T v) { return f * v; }, [f](T, T) { return f; });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor4<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  return a.tape().record("add", std::move(out), {a, b}, [aid, bid](Tape<T>& tape, std::size_t self) {
    const Tensor4<T> gy = *tape.grad(self);
    tape.accumulate(aid, gy);
    tape.accumulate(bid, gy);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor4<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t aid = a.id();
  const std::size_t bid = b.id();
  return a.tape().record("mul", std::move(out), {a, b}, [aid, bid](Tape<T>& tape, std::size_t self) {
    const auto& gy = *tape.grad(self);
    const auto& av = tape.value(aid);
    const auto& bv = tape.value(bid);
    if (tape.requires_grad(aid)) {
      Tensor4<T> ga(av.shape());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = gy[i] * bv[i];
      tape.accumulate(aid, ga);
    }
    if (tape.requires_grad(bid)) {
      Tensor4<T> gb(bv.shape());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = gy[i] * av[i];
      tape.accumulate(bid, gb);
    }
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw UsageError("concat_channels: no inputs");
  const Shape4 first = parts.front().shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ConfigError("concat_channels: shape mismatch " + first.str() + " vs " + s.str());
    }
    channels += s.c;
  }
  const Shape4 out_shape{first.n, channels, first.h, first.w};
  Tensor4<T> out(out_shape);
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t n = 0; n < first.n; ++n) {
      std::copy(v.plane(n, 0), v.plane(n, 0) + v.shape().sample(), out.plane(n, c0));
    }
    ids.push_back(p.id());
    offsets.push_back(c0);
    c0 += v.shape().c;
  }
  return parts.front().tape().record(
      "concat_channels", std::move(out), parts, [ids, offsets](Tape<T>& tape, std::size_t self) {
        const auto& gy = *tape.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!tape.requires_grad(ids[k])) continue;
          const Shape4 s = tape.value(ids[k]).shape();
          Tensor4<T> g(s);
          for (std::size_t n = 0; n < s.n; ++n) {
            std::copy(gy.plane(n, offsets[k]), gy.plane(n, offsets[k]) + s.sample(), g.plane(n, 0));
          }
          tape.accumulate(ids[k], g);
        }
      });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape4 xs = x.shape();
  if (count == 0 || begin + count > xs.c) {
    throw ConfigError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                      ") outside " + xs.str());
  }
  const Shape4 os{xs.n, count, xs.h, xs.w};
  Tensor4<T> out(os);
  const auto& xv = x.value();
  for (std::size_t n = 0; n < xs.n; ++n) {
    std::copy(xv.plane(n, begin), xv.plane(n, begin) + os.sample(), out.plane(n, 0));
  }
  const std::size_t xid = x.id();
  return x.tape().record("slice_channels", std::move(out), {x}, [=](Tape<T>& tape, std::size_t self) {
    const auto& gy = *tape.grad(self);
    Tensor4<T> g(xs);
    for (std::size_t n = 0; n < xs.n; ++n) {
      std::copy(gy.plane(n, 0), gy.plane(n, 0) + os.sample(), g.plane(n, begin));
    }
    tape.accumulate(xid, g);
  });
}

// Top-left anchored crop or zero pad to (height, width).
template <typename T>
Var<T> crop_or_pad(const Var<T>& x, std::size_t height, std::size_t width) {
  const Shape4 xs = x.shape();
  if (height == 0 || width == 0) throw ConfigError("crop_or_pad: target size must be positive");
  const Shape4 os{xs.n, xs.c, height, width};
  const std::size_t ch = std::min(xs.h, height);
  const std::size_t cw = std::min(xs.w, width);
  Tensor4<T> out(os);
  const auto& xv = x.value();
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t xx = 0; xx < cw; ++xx) out.at(n, c, y, xx) = xv.at(n, c, y, xx);
  const std::size_t xid = x.id();
  return x.tape().record("crop_or_pad", std::move(out), {x}, [=](Tape<T>& tape, std::size_t self) {
    const auto& gy = *tape.grad(self);
    Tensor4<T> g(xs);
    for (std::size_t n = 0; n < xs.n; ++n)
      for (std::size_t c = 0; c < xs.c; ++c)
        for (std::size_t y = 0; y < ch; ++y)
          for (std::size_t xx = 0; xx < cw; ++xx) g.at(n, c, y, xx) = gy.at(n, c, y, xx);
    tape.accumulate(xid, g);
  });
}

namespace detail {

// Half-pixel source coordinate for a x2 upsample, clamped to the border.
struct UpsampleTap {
  std::size_t i0;
  std::size_t i1;
  double frac;
};

inline UpsampleTap upsample_tap(std::size_t out_index, std::size_t in_size) {
  double src = (static_cast<double>(out_index) + 0.5) / 2.0 - 0.5;
  if (src < 0.0) src = 0.0;
  const auto i0 = static_cast<std::size_t>(src);
  const std::size_t i1 = std::min(i0 + 1, in_size - 1);
  return UpsampleTap{i0, i1, src - static_cast<double>(i0)};
}

}  // namespace detail

// Bilinear x2 upsampling with half-pixel centres and border clamping.
template <typename T>
Var<T> upsample_bilinear2x(const Var<T>& x) {
  const Shape4 xs = x.shape();
  const Shape4 os{xs.n, xs.c, xs.h * 2, xs.w * 2};
  Tensor4<T> out(os);
  const auto& xv = x.value();
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* src = xv.plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t oy = 0; oy < os.h; ++oy) {
        const auto ty = detail::upsample_tap(oy, xs.h);
        const T fy = static_cast<T>(ty.frac);
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const auto tx = detail::upsample_tap(ox, xs.w);
          const T fx = static_cast<T>(tx.frac);
          const T top = (T(1) - fx) * src[ty.i0 * xs.w + tx.i0] + fx * src[ty.i0 * xs.w + tx.i1];
          const T bot = (T(1) - fx) * src[ty.i1 * xs.w + tx.i0] + fx * src[ty.i1 * xs.w + tx.i1];
          dst[oy * os.w + ox] = (T(1) - fy) * top + fy * bot;
        }
      }
    }
  }
  const std::size_t xid = x.id();
  return x.tape().record("upsample_bilinear2x", std::move(out), {x}, [=](Tape<T>& tape, std::size_t self) {
    const auto& gy = *tape.grad(self);
    Tensor4<T> g(xs);
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t c = 0; c < xs.c; ++c) {
        const T* src = gy.plane(n, c);
        T* dst = g.plane(n, c);
        for (std::size_t oy = 0; oy < os.h; ++oy) {
          const auto ty = detail::upsample_tap(oy, xs.h);
          const T fy = static_cast<T>(ty.frac);
          for (std::size_t ox = 0; ox < os.w; ++ox) {
            const auto tx = detail::upsample_tap(ox, xs.w);
            const T fx = static_cast<T>(tx.frac);
            const T v = src[oy * os.w + ox];
            dst[ty.i0 * xs.w + tx.i0] += (T(1) - fy) * (T(1) - fx) * v;
            dst[ty.i0 * xs.w + tx.i1] += (T(1) - fy) * fx * v;
            dst[ty.i1 * xs.w + tx.i0] += fy * (T(1) - fx) * v;
            dst[ty.i1 * xs.w + tx.i1] += fy * fx * v;
          }
        }
      }
    }
    tape.accumulate(xid, g);
  });
}

// Scalar sum, shape (1, 1, 1, 1).
template <typename T>
Var<T> sum(const Var<T>& x) {
  const auto& xv = x.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]);
  Tensor4<T> out(Shape4{1, 1, 1, 1}, static_cast<T>(acc));
  const std::size_t xid = x.id();
  return x.tape().record("sum", std::move(out), {x}, [xid](Tape<T>& tape, std::size_t self) {
    const T g = (*tape.grad(self))[0];
    tape.accumulate(xid, Tensor4<T>(tape.value(xid).shape(), g));
  });
}

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { L1, L2 };

inline const char* loss_name(LossKind k) { return k == LossKind::L1 ? "L1" : "L2"; }

// Mean absolute (L1) or mean squared (L2) difference, as a scalar node.
// The L1 subgradient at an exact tie is 0.
template <typename T>
Var<T> loss(LossKind kind, const Var<T>& prediction, const Var<T>& target) {
  require_same_shape(prediction.shape(), target.shape(), "loss");
  const auto& p = prediction.value();
  const auto& t = target.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - static_cast<double>(t[i]);
    acc += kind == LossKind::L2 ? d * d : std::abs(d);
  }
  const double count = static_cast<double>(p.size());
  Tensor4<T> out(Shape4{1, 1, 1, 1}, static_cast<T>(acc / count));
  const std::size_t pid = prediction.id();
  const std::size_t tid = target.id();
  return prediction.tape().record(
      kind == LossKind::L2 ? "l2_loss" : "l1_loss", std::move(out), {prediction, target},
      [=](Tape<T>& tape, std::size_t self) {
        const T g = (*tape.grad(self))[0];
        const auto& p = tape.value(pid);
        const auto& t = tape.value(tid);
        Tensor4<T> gp(p.shape());
        for (std::size_t i = 0; i < p.size(); ++i) {
          const T d = p[i] - t[i];
          T dl;
          if (kind == LossKind::L2) {
            dl = T(2) * d;
          } else {
            dl = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
          }
          gp[i] = g * dl / static_cast<T>(count);
        }
        if (tape.requires_grad(pid)) tape.accumulate(pid, gp);
        if (tape.requires_grad(tid)) {
          for (auto& v : gp.vec()) v = -v;
          tape.accumulate(tid, gp);
        }
      });
}

}  // namespace sadnet
