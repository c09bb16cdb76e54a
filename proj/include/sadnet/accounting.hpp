#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "sadnet/model.hpp"

namespace sadnet {

// Cost conventions:
//   conv / transposed conv: FLOPs = 2 * MACs, MACs = k_h*k_w*in_c*out_c per
//     output pixel (per input pixel for the transposed case); bias adds are
//     not counted.
//   modulated deformable conv: the conv MACs as above, plus per (pixel, tap)
//     8 FLOPs for the sampling coordinate and bilinear weights, plus per
//     (pixel, tap, input channel) 8 FLOPs for the 4-tap interpolation and the
//     modulation product.
//   offset upsampling: 7 FLOPs per output element (bilinear), plus 1 per
//     offset element for the value doubling.
//   Activations, sigmoid, residual additions and concatenations are free.
struct LayerCost {
  std::string name;
  std::string kind;
  std::string kernel;
  Shape4 output;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::vector<LayerCost> layers;
};

namespace detail {

struct CostWalker {
  CostReport report;
  std::size_t batch = 1;

  void conv(const std::string& name, std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t h,
            std::size_t w) {
    const std::uint64_t macs = static_cast<std::uint64_t>(k) * k * in_c * out_c * h * w * batch;
    push(name, "conv", std::to_string(k) + "x" + std::to_string(k), Shape4{batch, out_c, h, w},
         static_cast<std::uint64_t>(k) * k * in_c * out_c + out_c, 2 * macs);
  }
  void down(const std::string& name, std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t out_h,
            std::size_t out_w) {
    const std::uint64_t macs = static_cast<std::uint64_t>(k) * k * in_c * out_c * out_h * out_w * batch;
    push(name, "down-conv", std::to_string(k) + "x" + std::to_string(k) + "/2", Shape4{batch, out_c, out_h, out_w},
         static_cast<std::uint64_t>(k) * k * in_c * out_c + out_c, 2 * macs);
  }
  void up(const std::string& name, std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t in_h,
          std::size_t in_w) {
    const std::uint64_t macs = static_cast<std::uint64_t>(k) * k * in_c * out_c * in_h * in_w * batch;
    push(name, "up-conv", std::to_string(k) + "x" + std::to_string(k) + "/2",
         Shape4{batch, out_c, in_h * 2, in_w * 2}, static_cast<std::uint64_t>(k) * k * in_c * out_c + out_c,
         2 * macs);
  }
  void deform(const std::string& name, std::size_t c, std::size_t k, std::size_t h, std::size_t w) {
    const std::uint64_t pix = static_cast<std::uint64_t>(h) * w * batch;
    const std::uint64_t taps = static_cast<std::uint64_t>(k) * k;
    const std::uint64_t flops = 2 * taps * c * c * pix + 8 * taps * pix + 8 * taps * c * pix;
    push(name, "deform-conv", std::to_string(k) + "x" + std::to_string(k), Shape4{batch, c, h, w}, taps * c * c + c,
         flops);
  }
  void upsample_field(const std::string& name, std::size_t taps, std::size_t out_h, std::size_t out_w) {
    const std::uint64_t elems = 3 * static_cast<std::uint64_t>(taps) * out_h * out_w * batch;
    const std::uint64_t offsets = 2 * static_cast<std::uint64_t>(taps) * out_h * out_w * batch;
    push(name, "upsample", "bilinear x2", Shape4{batch, 3 * taps, out_h, out_w}, 0, 7 * elems + offsets);
  }

  void push(const std::string& name, const std::string& kind, const std::string& kernel, Shape4 out,
            std::uint64_t params, std::uint64_t flops) {
    report.layers.push_back(LayerCost{name, kind, kernel, out, params, flops});
    report.params += params;
    report.flops += flops;
  }
};

}  // namespace detail

// Exact parameter count and FLOPs for one forward pass on `input`.
inline CostReport count_params_flops(const ModelConfig& cfg, const Shape4& input) {
  cfg.validate();
  check_input_size(cfg, input);
  detail::CostWalker walk;
  walk.batch = input.n;
  const auto& ch = cfg.channels_per_scale;
  const std::size_t S = cfg.scales;
  const std::size_t k = cfg.kernel_size;
  const std::size_t K = cfg.taps();
  const std::size_t u = cfg.updown_kernel;
  auto hs = [&](std::size_t s) { return input.h >> s; };
  auto wsz = [&](std::size_t s) { return input.w >> s; };

  walk.conv("head", cfg.in_channels, ch[0], 1, hs(0), wsz(0));
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t i = 0; i < cfg.resblocks_per_scale; ++i) {
      walk.conv(enc_res_name(s, i) + ".conv1", ch[s], ch[s], k, hs(s), wsz(s));
      walk.conv(enc_res_name(s, i) + ".conv2", ch[s], ch[s], k, hs(s), wsz(s));
    }
    if (s + 1 < S) walk.down("down" + std::to_string(s), ch[s], ch[s + 1], u, hs(s + 1), wsz(s + 1));
  }
  const std::size_t inner = cfg.context_width();
  walk.conv("context.compress", ch[S - 1], inner, 1, hs(S - 1), wsz(S - 1));
  for (std::size_t j = 0; j < cfg.context_dilations.size(); ++j) {
    walk.conv("context.branch" + std::to_string(j) + " (dilation " + std::to_string(cfg.context_dilations[j]) + ")",
              inner, inner, 3, hs(S - 1), wsz(S - 1));
  }
  walk.conv("context.fuse", inner * cfg.context_dilations.size(), ch[S - 1], 1, hs(S - 1), wsz(S - 1));
  for (std::size_t s = S; s-- > 0;) {
    if (s + 1 < S) {
      walk.up("up" + std::to_string(s + 1), ch[s + 1], ch[s], u, hs(s + 1), wsz(s + 1));
      walk.conv(dec_name(s) + ".fuse", 2 * ch[s], ch[s], 1, hs(s), wsz(s));
    }
    walk.conv(dec_name(s) + ".offset.feature", ch[s], cfg.offset_channels, k, hs(s), wsz(s));
    std::size_t head_in = cfg.offset_channels;
    if (s + 1 < S) {
      walk.upsample_field(dec_name(s) + ".offset.upsample", K, hs(s), wsz(s));
      head_in += 3 * K;
    }
    walk.conv(dec_name(s) + ".offset.head", head_in, 3 * K, k, hs(s), wsz(s));
    for (std::size_t i = 0; i < cfg.rsabs_per_scale; ++i) {
      walk.deform(rsab_name(s, i) + ".deform", ch[s], k, hs(s), wsz(s));
      walk.conv(rsab_name(s, i) + ".conv", ch[s], ch[s], k, hs(s), wsz(s));
    }
  }
  walk.conv("tail", ch[0], cfg.in_channels, 1, hs(0), wsz(0));
  return walk.report;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Machine-readable summary (tab-separated key/value lines) followed by the
// per-layer table. This is what `inspect` prints.
inline std::string inspect_report(const ModelConfig& cfg, std::size_t height, std::size_t width) {
  const Shape4 input{1, cfg.in_channels, height, width};
  const auto report = count_params_flops(cfg, input);
  std::ostringstream os;
  os << "in_channels\t" << cfg.in_channels << "\n";
  os << "scales\t" << cfg.scales << "\n";
  os << "channels_per_scale\t" << join_sizes(cfg.channels_per_scale) << "\n";
  os << "resblocks_per_scale\t" << cfg.resblocks_per_scale << "\n";
  os << "rsabs_per_scale\t" << cfg.rsabs_per_scale << "\n";
  os << "context_dilations\t" << join_sizes(cfg.context_dilations) << "\n";
  os << "context_compression\t" << cfg.context_compression << "\n";
  os << "offset_channels\t" << cfg.offset_channels << "\n";
  os << "leaky_slope\t" << cfg.leaky_slope << "\n";
  os << "head_kernel\t1x1\n";
  os << "tail_kernel\t1x1\n";
  os << "down_kernel\t" << cfg.updown_kernel << "x" << cfg.updown_kernel << "/2\n";
  os << "up_kernel\t" << cfg.updown_kernel << "x" << cfg.updown_kernel << "/2\n";
  os << "kernel_size\t" << cfg.kernel_size << "x" << cfg.kernel_size << "\n";
  os << "input\t" << width << "x" << height << "x" << cfg.in_channels << "\n";
  os << "params\t" << report.params << "\n";
  os << "flops\t" << report.flops << "\n";
  os << "gflops\t" << std::fixed << std::setprecision(2) << static_cast<double>(report.flops) / 1e9 << "\n";
  os << "\n";
  os << std::left << std::setw(34) << "layer" << std::setw(13) << "kind" << std::setw(13) << "kernel"
     << std::setw(24) << "output" << std::right << std::setw(10) << "params" << std::setw(16) << "flops" << "\n";
  for (const auto& l : report.layers) {
    os << std::left << std::setw(34) << l.name << std::setw(13) << l.kind << std::setw(13) << l.kernel
       << std::setw(24) << l.output.str() << std::right << std::setw(10) << l.params << std::setw(16) << l.flops
       << "\n";
  }
  return os.str();
}

}  // namespace sadnet
