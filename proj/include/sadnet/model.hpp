#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sadnet/deform_conv.hpp"
#include "sadnet/error.hpp"
#include "sadnet/ops.hpp"
#include "sadnet/params.hpp"
#include "sadnet/rng.hpp"
#include "sadnet/tape.hpp"

namespace sadnet {

// Architectural hyperparameters of the spatial-adaptive encoder-decoder.
// Scale 0 is the finest (input resolution); scale s has size input / 2^s.
struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t scales = 4;
  std::vector<std::size_t> channels_per_scale{32, 64, 128, 256};
  std::size_t resblocks_per_scale = 1;
  std::size_t rsabs_per_scale = 1;
  std::vector<std::size_t> context_dilations{1, 2, 3, 4};
  std::size_t context_compression = 4;
  double leaky_slope = 0.2;
  std::size_t kernel_size = 3;
  std::size_t updown_kernel = 2;
  // Width of the hidden layer of each offset-transfer head.
  std::size_t offset_channels = 32;

  std::size_t taps() const { return kernel_size * kernel_size; }
  std::size_t size_divisor() const { return std::size_t{1} << (scales - 1); }
  std::size_t coarsest_channels() const { return channels_per_scale.back(); }
  std::size_t context_width() const { return coarsest_channels() / context_compression; }

  void validate() const {
    if (in_channels != 1 && in_channels != 3) {
      throw ConfigError("in_channels must be 1 or 3, got " + std::to_string(in_channels));
    }
    if (scales == 0 || scales > 16) throw ConfigError("scales must be in [1, 16]");
    if (channels_per_scale.size() != scales) {
      throw ConfigError("channels_per_scale has " + std::to_string(channels_per_scale.size()) +
                        " entries but scales = " + std::to_string(scales));
    }
    for (auto c : channels_per_scale) {
      if (c == 0) throw ConfigError("channels_per_scale entries must be positive");
    }
    if (rsabs_per_scale == 0) throw ConfigError("rsabs_per_scale must be >= 1");
    if (context_dilations.empty()) throw ConfigError("context_dilations must not be empty");
    for (auto d : context_dilations) {
      if (d == 0) throw ConfigError("context_dilations entries must be >= 1");
    }
    if (context_compression == 0 || coarsest_channels() % context_compression != 0) {
      throw ConfigError("context_compression " + std::to_string(context_compression) +
                        " does not divide the coarsest channel count " + std::to_string(coarsest_channels()));
    }
    if (kernel_size % 2 == 0) throw ConfigError("kernel_size must be odd");
    if (updown_kernel != 2) throw ConfigError("updown_kernel must be 2 (stride-2 down/up sampling)");
    if (offset_channels == 0) throw ConfigError("offset_channels must be >= 1");
    if (!std::isfinite(leaky_slope) || leaky_slope < 0.0) throw ConfigError("leaky_slope must be finite and >= 0");
  }

  // Desk-scale configuration used for smoke training.
  static ModelConfig micro(std::size_t in_channels = 1) {
    ModelConfig c;
    c.in_channels = in_channels;
    c.channels_per_scale = {8, 16, 32, 64};
    c.offset_channels = 16;
    return c;
  }
};

inline bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.in_channels == b.in_channels && a.scales == b.scales && a.channels_per_scale == b.channels_per_scale &&
         a.resblocks_per_scale == b.resblocks_per_scale && a.rsabs_per_scale == b.rsabs_per_scale &&
         a.context_dilations == b.context_dilations && a.context_compression == b.context_compression &&
         a.leaky_slope == b.leaky_slope && a.kernel_size == b.kernel_size && a.updown_kernel == b.updown_kernel &&
         a.offset_channels == b.offset_channels;
}

// ---------------------------------------------------------------------------
// Blocks

template <typename T>
struct ResBlockWeights {
  ConvParams<T> conv1;
  ConvParams<T> conv2;
};

template <typename T>
struct RsabWeights {
  ConvParams<T> deform;
  ConvParams<T> conv;
};

template <typename T>
struct OffsetTransferWeights {
  ConvParams<T> feature;
  ConvParams<T> head;
};

template <typename T>
struct ContextBlockWeights {
  ConvParams<T> compress;
  std::vector<ConvParams<T>> branches;
  ConvParams<T> fuse;
};

// Sampling offsets and modulation of one deformable layer.
template <typename T>
struct OffsetField {
  Var<T> offsets;  // (n, 2K, h, w)
  Var<T> masks;    // (n, K, h, w), in [0, 1]
};

namespace detail {

inline void require_channels(const char* block, const Shape4& weight, std::size_t out_c, std::size_t in_c) {
  if (weight.n != out_c || weight.c != in_c) {
    throw ConfigError(std::string(block) + ": weight " + weight.str() + " is not " + std::to_string(out_c) + " <- " +
                      std::to_string(in_c) + " channels");
  }
}

}  // namespace detail

// conv -> leaky ReLU -> conv, plus identity.
template <typename T>
Var<T> resblock_forward(const Var<T>& x, const ResBlockWeights<T>& w, double slope) {
  const std::size_t c = x.shape().c;
  detail::require_channels("resblock", w.conv1.weight.shape(), c, c);
  detail::require_channels("resblock", w.conv2.weight.shape(), c, c);
  auto h = leaky_relu(conv2d(x, w.conv1), slope);
  return add(conv2d(h, w.conv2), x);
}

// modulated deformable conv -> leaky ReLU -> conv, plus identity.
template <typename T>
Var<T> rsab_forward(const Var<T>& x, const OffsetField<T>& field, const RsabWeights<T>& w, double slope) {
  const std::size_t c = x.shape().c;
  detail::require_channels("rsab", w.deform.weight.shape(), c, c);
  detail::require_channels("rsab", w.conv.weight.shape(), c, c);
  auto h = leaky_relu(modulated_deform_conv2d(x, w.deform, field.offsets, field.masks), slope);
  return add(conv2d(h, w.conv), x);
}

// Doubles the resolution of both fields bilinearly; offsets are measured in
// pixels of their own scale, so their values are doubled as well.
template <typename T>
OffsetField<T> upsample_offsets(const OffsetField<T>& field) {
  return OffsetField<T>{scale(upsample_bilinear2x(field.offsets), 2.0), upsample_bilinear2x(field.masks)};
}

// Predicts the offsets and masks of a scale from its features and, when
// present, the field of the next coarser scale.
template <typename T>
OffsetField<T> offset_transfer(const Var<T>& x, const std::optional<OffsetField<T>>& prev,
                               const OffsetTransferWeights<T>& w, double slope, std::size_t taps) {
  detail::require_channels("offset_transfer", w.feature.weight.shape(), w.feature.weight.shape().n, x.shape().c);
  auto h = leaky_relu(conv2d(x, w.feature), slope);
  if (prev) {
    const auto up = upsample_offsets(*prev);
    if (up.offsets.shape().h != x.shape().h || up.offsets.shape().w != x.shape().w) {
      throw ConfigError("offset_transfer: previous field " + prev->offsets.shape().str() +
                        " is not half the size of " + x.shape().str());
    }
    h = concat_channels<T>({h, up.offsets, up.masks});
  }
  const std::size_t want_in = h.shape().c;
  detail::require_channels("offset_transfer", w.head.weight.shape(), 3 * taps, want_in);
  auto raw = conv2d(h, w.head);
  return OffsetField<T>{slice_channels(raw, 0, 2 * taps), sigmoid(slice_channels(raw, 2 * taps, taps))};
}

// 1x1 compression -> parallel dilated 3x3 branches -> concat -> 1x1 fusion,
// plus identity.
template <typename T>
Var<T> context_block_forward(const Var<T>& x, const ContextBlockWeights<T>& w, double slope,
                             std::size_t compression) {
  const std::size_t c = x.shape().c;
  if (compression == 0 || c % compression != 0) {
    throw ConfigError("context block: " + std::to_string(c) + " channels not divisible by compression " +
                      std::to_string(compression));
  }
  const std::size_t inner = c / compression;
  detail::require_channels("context block", w.compress.weight.shape(), inner, c);
  auto squeezed = leaky_relu(conv2d(x, w.compress), slope);
  std::vector<Var<T>> branches;
  for (const auto& b : w.branches) {
    detail::require_channels("context block", b.weight.shape(), inner, inner);
    branches.push_back(leaky_relu(conv2d(squeezed, b), slope));
  }
  detail::require_channels("context block", w.fuse.weight.shape(), c, inner * w.branches.size());
  return add(conv2d(concat_channels(branches), w.fuse), x);
}

// ---------------------------------------------------------------------------
// Parameter layout

enum class InitKind { HeUniform, Zero };

struct ParamSpec {
  std::string name;
  Shape4 shape;
  InitKind init;
  std::size_t fan_in;
};

namespace detail {

inline void conv_spec(std::vector<ParamSpec>& out, const std::string& name, std::size_t out_c, std::size_t in_c,
                      std::size_t k, InitKind init = InitKind::HeUniform) {
  out.push_back({name + ".weight", Shape4{out_c, in_c, k, k}, init, in_c * k * k});
  out.push_back({name + ".bias", Shape4{1, out_c, 1, 1}, InitKind::Zero, 0});
}

// Transposed conv weights are (in_c, out_c, k, k); with stride == kernel each
// output pixel sees in_c inputs.
inline void up_spec(std::vector<ParamSpec>& out, const std::string& name, std::size_t in_c, std::size_t out_c,
                    std::size_t k) {
  out.push_back({name + ".weight", Shape4{in_c, out_c, k, k}, InitKind::HeUniform, in_c});
  out.push_back({name + ".bias", Shape4{1, out_c, 1, 1}, InitKind::Zero, 0});
}

}  // namespace detail

inline std::string enc_res_name(std::size_t s, std::size_t i) {
  return "enc" + std::to_string(s) + ".res" + std::to_string(i);
}
inline std::string dec_name(std::size_t s) { return "dec" + std::to_string(s); }
inline std::string rsab_name(std::size_t s, std::size_t i) { return dec_name(s) + ".rsab" + std::to_string(i); }

// Every trainable tensor in forward order. The order defines the checkpoint
// layout.
inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  const auto& ch = cfg.channels_per_scale;
  const std::size_t S = cfg.scales;
  const std::size_t k = cfg.kernel_size;
  const std::size_t K = cfg.taps();
  detail::conv_spec(out, "head", ch[0], cfg.in_channels, 1);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t i = 0; i < cfg.resblocks_per_scale; ++i) {
      detail::conv_spec(out, enc_res_name(s, i) + ".conv1", ch[s], ch[s], k);
      detail::conv_spec(out, enc_res_name(s, i) + ".conv2", ch[s], ch[s], k);
    }
    if (s + 1 < S) detail::conv_spec(out, "down" + std::to_string(s), ch[s + 1], ch[s], cfg.updown_kernel);
  }
  const std::size_t inner = cfg.context_width();
  detail::conv_spec(out, "context.compress", inner, ch[S - 1], 1);
  for (std::size_t j = 0; j < cfg.context_dilations.size(); ++j) {
    detail::conv_spec(out, "context.branch" + std::to_string(j), inner, inner, 3);
  }
  detail::conv_spec(out, "context.fuse", ch[S - 1], inner * cfg.context_dilations.size(), 1);
  for (std::size_t s = S; s-- > 0;) {
    if (s + 1 < S) {
      detail::up_spec(out, "up" + std::to_string(s + 1), ch[s + 1], ch[s], cfg.updown_kernel);
      detail::conv_spec(out, dec_name(s) + ".fuse", ch[s], 2 * ch[s], 1);
    }
    detail::conv_spec(out, dec_name(s) + ".offset.feature", cfg.offset_channels, ch[s], k);
    const std::size_t head_in = cfg.offset_channels + (s + 1 < S ? 3 * K : 0);
    detail::conv_spec(out, dec_name(s) + ".offset.head", 3 * K, head_in, k, InitKind::Zero);
    for (std::size_t i = 0; i < cfg.rsabs_per_scale; ++i) {
      detail::conv_spec(out, rsab_name(s, i) + ".deform", ch[s], ch[s], k);
      detail::conv_spec(out, rsab_name(s, i) + ".conv", ch[s], ch[s], k);
    }
  }
  detail::conv_spec(out, "tail", cfg.in_channels, ch[0], 1, InitKind::Zero);
  return out;
}

// He-uniform (fan-in) weights, zero biases; the offset heads and the tail
// start at zero so the untrained network is the identity map.
template <typename T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  ParamStore<T> store;
  for (const auto& spec : param_specs(cfg)) {
    Tensor4<T> t(spec.shape);
    if (spec.init == InitKind::HeUniform) {
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
      for (auto& v : t.vec()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    }
    store.add(spec.name, std::move(t));
  }
  return store;
}

// ---------------------------------------------------------------------------
// Full network

template <typename T>
ConvParams<T> conv_params(const BoundParams<T>& p, const std::string& name, ConvGeometry g = {}) {
  return ConvParams<T>{p[name + ".weight"], p[name + ".bias"], g};
}

template <typename T>
struct ScaleState {
  Var<T> features;  // decoder output at this scale
  OffsetField<T> field;
};

template <typename T>
struct ForwardResult {
  Var<T> output;
  std::vector<Shape4> encoder_shapes;  // indexed by scale
  std::vector<ScaleState<T>> scales;   // indexed by scale
};

inline void check_input_size(const ModelConfig& cfg, const Shape4& s) {
  if (s.c != cfg.in_channels) {
    throw ConfigError("model expects " + std::to_string(cfg.in_channels) + " input channels, got " + s.str());
  }
  const std::size_t d = cfg.size_divisor();
  if (s.h % d != 0 || s.w % d != 0 || s.h == 0 || s.w == 0) {
    throw UsageError("input " + std::to_string(s.h) + "x" + std::to_string(s.w) + " is not divisible by " +
                     std::to_string(d) + "; pad the image to a multiple of " + std::to_string(d));
  }
}

template <typename T>
ForwardResult<T> sadnet_forward(const Var<T>& x, const ModelConfig& cfg, const BoundParams<T>& p) {
  cfg.validate();
  check_input_size(cfg, x.shape());
  const std::size_t S = cfg.scales;
  const double slope = cfg.leaky_slope;
  const auto same = ConvGeometry::same(cfg.kernel_size);
  const ConvGeometry down{{2, 2}, {1, 1}, {0, 0}};

  ForwardResult<T> result;
  result.encoder_shapes.resize(S);
  result.scales.resize(S);

  auto f = conv2d(x, conv_params(p, "head"));
  std::vector<Var<T>> skips(S);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t i = 0; i < cfg.resblocks_per_scale; ++i) {
      const auto n = enc_res_name(s, i);
      f = resblock_forward(f, ResBlockWeights<T>{conv_params(p, n + ".conv1", same), conv_params(p, n + ".conv2", same)},
                           slope);
    }
    skips[s] = f;
    result.encoder_shapes[s] = f.shape();
    if (s + 1 < S) f = conv2d(f, conv_params(p, "down" + std::to_string(s), down));
  }

  ContextBlockWeights<T> ctx{conv_params(p, "context.compress"), {}, conv_params(p, "context.fuse")};
  for (std::size_t j = 0; j < cfg.context_dilations.size(); ++j) {
    ctx.branches.push_back(
        conv_params(p, "context.branch" + std::to_string(j), ConvGeometry::same(3, cfg.context_dilations[j])));
  }
  f = context_block_forward(f, ctx, slope, cfg.context_compression);

  std::optional<OffsetField<T>> prev;
  for (std::size_t s = S; s-- > 0;) {
    const auto d = dec_name(s);
    if (s + 1 < S) {
      auto up = conv2d_transpose(f, conv_params(p, "up" + std::to_string(s + 1), down));
      f = conv2d(concat_channels<T>({up, skips[s]}), conv_params(p, d + ".fuse"));
    }
    const OffsetTransferWeights<T> ow{conv_params(p, d + ".offset.feature", same),
                                      conv_params(p, d + ".offset.head", same)};
    auto field = offset_transfer(f, prev, ow, slope, cfg.taps());
    for (std::size_t i = 0; i < cfg.rsabs_per_scale; ++i) {
      const auto n = rsab_name(s, i);
      f = rsab_forward(f, field, RsabWeights<T>{conv_params(p, n + ".deform", same), conv_params(p, n + ".conv", same)},
                       slope);
    }
    result.scales[s] = ScaleState<T>{f, field};
    prev = field;
  }

  result.output = add(x, conv2d(f, conv_params(p, "tail")));
  return result;
}

// Forward pass without gradient bookkeeping.
template <typename T>
Tensor4<T> sadnet_infer(const Tensor4<T>& x, const ModelConfig& cfg, const ParamStore<T>& params) {
  Tape<T> tape;
  BoundParams<T> bound(tape, params, false);
  auto in = tape.constant(x);
  return sadnet_forward(in, cfg, bound).output.value();
}

}  // namespace sadnet
