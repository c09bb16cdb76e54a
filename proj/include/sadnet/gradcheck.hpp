#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sadnet/deform_conv.hpp"
#include "sadnet/model.hpp"
#include "sadnet/ops.hpp"
#include "sadnet/params.hpp"
#include "sadnet/rng.hpp"
#include "sadnet/tape.hpp"

namespace sadnet {

// Central differences (f(v + h) - f(v - h)) / 2h against the reverse-mode
// gradient. An element passes when |a - n| < rel_tol * max(|a|, |n|) or
// |a - n| < abs_tol; equivalently when
//   err = |a - n| / max(|a|, |n|, abs_tol / rel_tol) < rel_tol,
// which is the "relative error" reported.
struct GradCheckOptions {
  double h = 1e-3;
  double rel_tol = 1e-4;
  double abs_tol = 1e-6;
};

struct GradInput {
  std::string label;
  Tensor4<double> value;
  bool check = true;  // false: constant input, not differentiated
};

struct GradCheckResult {
  std::string name;
  double worst = 0.0;
  std::string worst_at;
  std::size_t checked = 0;
  bool pass = true;
};

using LossBuilder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline GradCheckResult check_gradients(const std::string& name, std::vector<GradInput> inputs, const LossBuilder& build,
                                       const GradCheckOptions& opt = {}) {
  auto evaluate = [&](std::vector<Tensor4<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (const auto& in : inputs) vars.push_back(tape.leaf(in.value, in.check));
    const auto L = build(tape, vars);
    if (L.value().size() != 1) throw UsageError("gradcheck '" + name + "': loss is not a scalar");
    if (grads) {
      const auto g = backward(L);
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        grads->push_back(inputs[i].check ? g.at(vars[i]) : Tensor4<double>{});
      }
    }
    return L.value()[0];
  };

  std::vector<Tensor4<double>> analytic;
  evaluate(&analytic);

  GradCheckResult r;
  r.name = name;
  const double floor = opt.abs_tol / opt.rel_tol;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].check) continue;
    auto& v = inputs[i].value;
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double orig = v[j];
      v[j] = orig + opt.h;
      const double fp = evaluate(nullptr);
      v[j] = orig - opt.h;
      const double fm = evaluate(nullptr);
      v[j] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++r.checked;
      if (!(err < opt.rel_tol)) r.pass = false;
      if (err > r.worst || std::isnan(err)) {
        r.worst = std::isnan(err) ? INFINITY : err;
        r.worst_at = inputs[i].label + "[" + std::to_string(j) + "]";
      }
    }
  }
  return r;
}

namespace detail {

inline Tensor4<double> uniform_tensor(const Shape4& s, Xoshiro256& rng, double lo, double hi) {
  Tensor4<double> t(s);
  for (auto& v : t.vec()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Values with |v| in [lo, hi] and random sign, away from the kinks at zero.
inline Tensor4<double> away_from_zero(const Shape4& s, Xoshiro256& rng, double lo, double hi) {
  Tensor4<double> t(s);
  for (auto& v : t.vec()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (lo + (hi - lo) * rng.uniform());
  return t;
}

// Integer offsets shifted by +-0.3 so no sampling point lands on a grid line.
inline Tensor4<double> fractional_offsets(const Shape4& s, Xoshiro256& rng) {
  Tensor4<double> t(s);
  for (auto& v : t.vec()) {
    v = static_cast<double>(static_cast<int>(rng.below(5)) - 2) + (rng.uniform() < 0.5 ? -0.3 : 0.3);
  }
  return t;
}

// sum(y * R) for a fixed random R, so every output element gets a distinct
// upstream gradient.
inline Var<double> project(Tape<double>& tape, const Var<double>& y, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  auto R = tape.constant(uniform_tensor(y.shape(), rng, -1.0, 1.0));
  return sum(mul(y, R));
}

}  // namespace detail

// Finite-difference checks of every differentiable primitive.
inline std::vector<GradCheckResult> gradcheck_ops(const GradCheckOptions& opt = {}) {
  Xoshiro256 rng(20240611);
  using V = std::vector<Var<double>>;
  std::vector<GradCheckResult> out;
  auto U = [&](Shape4 s, double lo = -1.0, double hi = 1.0) { return detail::uniform_tensor(s, rng, lo, hi); };

  out.push_back(check_gradients(
      "conv2d",
      {{"x", U({2, 3, 6, 6})}, {"weight", U({4, 3, 3, 3})}, {"bias", U({1, 4, 1, 1})}},
      [](Tape<double>& t, const V& v) {
        return detail::project(t, conv2d(v[0], ConvParams<double>{v[1], v[2], ConvGeometry::same(3)}), 1);
      },
      opt));
  out.push_back(check_gradients(
      "conv2d(stride 2, dilation 2)",
      {{"x", U({2, 3, 6, 6})}, {"weight", U({2, 3, 3, 3})}, {"bias", U({1, 2, 1, 1})}},
      [](Tape<double>& t, const V& v) {
        const ConvGeometry g{{2, 2}, {2, 2}, {2, 2}};
        return detail::project(t, conv2d(v[0], ConvParams<double>{v[1], v[2], g}), 2);
      },
      opt));
  out.push_back(check_gradients(
      "conv2d_transpose",
      {{"x", U({2, 3, 3, 3})}, {"weight", U({3, 2, 2, 2})}, {"bias", U({1, 2, 1, 1})}},
      [](Tape<double>& t, const V& v) {
        const ConvGeometry g{{2, 2}, {1, 1}, {0, 0}};
        return detail::project(t, conv2d_transpose(v[0], ConvParams<double>{v[1], v[2], g}), 3);
      },
      opt));
  out.push_back(check_gradients(
      "modulated_deform_conv2d",
      {{"x", U({2, 3, 6, 6})},
       {"weight", U({4, 3, 3, 3})},
       {"bias", U({1, 4, 1, 1})},
       {"offsets", detail::fractional_offsets({2, 18, 6, 6}, rng)},
       {"masks", U({2, 9, 6, 6}, 0.1, 0.9)}},
      [](Tape<double>& t, const V& v) {
        return detail::project(
            t, modulated_deform_conv2d(v[0], ConvParams<double>{v[1], v[2], ConvGeometry::same(3)}, v[3], v[4]), 4);
      },
      opt));
  out.push_back(check_gradients(
      "leaky_relu", {{"x", detail::away_from_zero({2, 4, 6, 6}, rng, 0.05, 1.0)}},
      [](Tape<double>& t, const V& v) { return detail::project(t, leaky_relu(v[0], 0.2), 5); }, opt));
  out.push_back(check_gradients(
      "sigmoid", {{"x", U({2, 4, 6, 6}, -3.0, 3.0)}},
      [](Tape<double>& t, const V& v) { return detail::project(t, sigmoid(v[0]), 6); }, opt));
  out.push_back(check_gradients(
      "scale", {{"x", U({2, 4, 6, 6})}},
      [](Tape<double>& t, const V& v) { return detail::project(t, scale(v[0], 2.0), 7); }, opt));
  out.push_back(check_gradients(
      "add", {{"a", U({2, 4, 6, 6})}, {"b", U({2, 4, 6, 6})}},
      [](Tape<double>& t, const V& v) { return detail::project(t, add(v[0], v[1]), 8); }, opt));
  out.push_back(check_gradients(
      "mul", {{"a", U({2, 4, 6, 6})}, {"b", U({2, 4, 6, 6})}},
      [](Tape<double>& t, const V& v) { return detail::project(t, mul(v[0], v[1]), 9); }, opt));
  out.push_back(check_gradients(
      "concat_channels", {{"a", U({2, 1, 6, 6})}, {"b", U({2, 3, 6, 6})}},
      [](Tape<double>& t, const V& v) { return detail::project(t, concat_channels<double>({v[0], v[1]}), 10); },
      opt));
  out.push_back(check_gradients(
      "slice_channels", {{"x", U({2, 4, 6, 6})}},
      [](Tape<double>& t, const V& v) { return detail::project(t, slice_channels(v[0], 1, 2), 11); }, opt));
  out.push_back(check_gradients(
      "crop_or_pad", {{"x", U({2, 4, 6, 6})}},
      [](Tape<double>& t, const V& v) { return detail::project(t, crop_or_pad(v[0], 4, 8), 12); }, opt));
  out.push_back(check_gradients(
      "upsample_bilinear2x", {{"x", U({2, 4, 3, 3})}},
      [](Tape<double>& t, const V& v) { return detail::project(t, upsample_bilinear2x(v[0]), 13); }, opt));
  out.push_back(check_gradients(
      "sum", {{"x", U({2, 4, 6, 6})}}, [](Tape<double>&, const V& v) { return sum(v[0]); }, opt));
  out.push_back(check_gradients(
      "loss(L2)", {{"prediction", U({2, 4, 6, 6})}, {"target", U({2, 4, 6, 6})}},
      [](Tape<double>&, const V& v) { return loss(LossKind::L2, v[0], v[1]); }, opt));
  {
    auto target = U({2, 4, 6, 6});
    auto diff = detail::away_from_zero({2, 4, 6, 6}, rng, 0.05, 1.0);
    auto pred = target;
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] += diff[i];
    out.push_back(check_gradients(
        "loss(L1)", {{"prediction", pred}, {"target", target}},
        [](Tape<double>&, const V& v) { return loss(LossKind::L1, v[0], v[1]); }, opt));
  }
  return out;
}

// Two-scale micro network used by the end-to-end check.
inline ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.in_channels = 1;
  c.scales = 2;
  c.channels_per_scale = {4, 8};
  c.resblocks_per_scale = 1;
  c.rsabs_per_scale = 1;
  c.offset_channels = 4;
  return c;
}

// Random parameters for gradient checks. Every tensor is non-zero (the tail
// and offset heads included). Weights are small and biases are +-[0.6, 1] so
// that every leaky ReLU input stays well away from zero; offset-head outputs
// stay near +-0.3 so sampling points avoid grid lines.
inline ParamStore<double> gradcheck_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  ParamStore<double> store;
  const std::size_t K = cfg.taps();
  auto sign = [&] { return rng.uniform() < 0.5 ? -1.0 : 1.0; };
  for (const auto& spec : param_specs(cfg)) {
    Tensor4<double> t(spec.shape);
    const bool head = spec.name.find(".offset.head.") != std::string::npos;
    const bool bias = spec.name.ends_with(".bias");
    if (head && bias) {
      for (std::size_t c = 0; c < spec.shape.c; ++c) {
        t[c] = c < 2 * K ? 0.3 * sign() : 0.5 * (2.0 * rng.uniform() - 1.0);
      }
    } else if (head) {
      for (auto& v : t.vec()) v = 0.002 * (2.0 * rng.uniform() - 1.0);
    } else if (bias) {
      for (auto& v : t.vec()) v = sign() * (0.6 + 0.4 * rng.uniform());
    } else {
      const double fan = static_cast<double>(spec.shape.c * spec.shape.h * spec.shape.w);
      const double bound = 0.1 * std::sqrt(6.0 / fan);
      for (auto& v : t.vec()) v = bound * (2.0 * rng.uniform() - 1.0);
    }
    store.add(spec.name, std::move(t));
  }
  return store;
}

// Distance of the evaluation point from the non-differentiable set of a tape:
// the smallest |input| of any leaky ReLU and the smallest distance of any
// deformable sampling offset from an integer.
struct KinkMargin {
  double leaky = INFINITY;
  double sampling = INFINITY;
};

template <typename T>
KinkMargin kink_margin(const Tape<T>& tape) {
  KinkMargin m;
  for (std::size_t id = 0; id < tape.size(); ++id) {
    const auto& node = tape.node(id);
    if (node.op == "leaky_relu") {
      for (auto v : tape.value(node.inputs[0]).vec()) m.leaky = std::min(m.leaky, std::abs(static_cast<double>(v)));
    } else if (node.op == "modulated_deform_conv2d") {
      for (auto v : tape.value(node.inputs[2]).vec()) {
        const double d = static_cast<double>(v);
        m.sampling = std::min(m.sampling, std::abs(d - std::round(d)));
      }
    }
  }
  return m;
}

// Block-level and end-to-end checks through the network.
inline std::vector<GradCheckResult> gradcheck_model(const GradCheckOptions& opt = {}) {
  Xoshiro256 rng(7);
  using V = std::vector<Var<double>>;
  std::vector<GradCheckResult> out;
  auto U = [&](Shape4 s, double lo = -1.0, double hi = 1.0) { return detail::uniform_tensor(s, rng, lo, hi); };
  const auto same = ConvGeometry::same(3);

  out.push_back(check_gradients(
      "resblock",
      {{"x", U({1, 3, 5, 5})}, {"w1", U({3, 3, 3, 3}, -0.5, 0.5)}, {"b1", U({1, 3, 1, 1}, -0.1, 0.1)},
       {"w2", U({3, 3, 3, 3}, -0.5, 0.5)}, {"b2", U({1, 3, 1, 1}, -0.1, 0.1)}},
      [same](Tape<double>& t, const V& v) {
        const ResBlockWeights<double> w{{v[1], v[2], same}, {v[3], v[4], same}};
        return detail::project(t, resblock_forward(v[0], w, 0.2), 21);
      },
      opt));
  out.push_back(check_gradients(
      "rsab",
      {{"x", U({1, 3, 5, 5})}, {"offsets", detail::fractional_offsets({1, 18, 5, 5}, rng)},
       {"masks", U({1, 9, 5, 5}, 0.1, 0.9)}, {"w_deform", U({3, 3, 3, 3}, -0.1, 0.1)},
       {"b_deform", detail::away_from_zero({1, 3, 1, 1}, rng, 0.5, 1.0)}, {"w_conv", U({3, 3, 3, 3}, -0.5, 0.5)},
       {"b_conv", U({1, 3, 1, 1}, -0.1, 0.1)}},
      [same](Tape<double>& t, const V& v) {
        const RsabWeights<double> w{{v[3], v[4], same}, {v[5], v[6], same}};
        return detail::project(t, rsab_forward(v[0], OffsetField<double>{v[1], v[2]}, w, 0.2), 22);
      },
      opt));
  out.push_back(check_gradients(
      "offset_transfer",
      {{"x", U({1, 3, 4, 4})}, {"prev_offsets", U({1, 18, 2, 2})}, {"prev_masks", U({1, 9, 2, 2}, 0.1, 0.9)},
       {"w_feature", U({2, 3, 3, 3}, -0.5, 0.5)}, {"b_feature", U({1, 2, 1, 1}, -0.1, 0.1)},
       {"w_head", U({27, 29, 3, 3}, -0.3, 0.3)}, {"b_head", U({1, 27, 1, 1}, -0.1, 0.1)}},
      [same](Tape<double>& t, const V& v) {
        const OffsetTransferWeights<double> w{{v[3], v[4], same}, {v[5], v[6], same}};
        const auto f = offset_transfer<double>(v[0], OffsetField<double>{v[1], v[2]}, w, 0.2, 9);
        return add(detail::project(t, f.offsets, 23), detail::project(t, f.masks, 24));
      },
      opt));
  out.push_back(check_gradients(
      "context_block",
      {{"x", U({1, 8, 5, 5})}, {"w_compress", U({2, 8, 1, 1}, -0.5, 0.5)}, {"b_compress", U({1, 2, 1, 1}, -0.1, 0.1)},
       {"w_branch0", U({2, 2, 3, 3}, -0.5, 0.5)}, {"w_branch1", U({2, 2, 3, 3}, -0.5, 0.5)},
       {"w_fuse", U({8, 4, 1, 1}, -0.5, 0.5)}, {"b_fuse", U({1, 8, 1, 1}, -0.1, 0.1)}},
      [](Tape<double>& t, const V& v) {
        ContextBlockWeights<double> w{{v[1], v[2], {}}, {}, {v[5], v[6], {}}};
        w.branches.push_back({v[3], std::nullopt, ConvGeometry::same(3, 1)});
        w.branches.push_back({v[4], std::nullopt, ConvGeometry::same(3, 2)});
        return detail::project(t, context_block_forward(v[0], w, 0.2, 4), 25);
      },
      opt));

  // End to end: L2 loss of the micro network against a random target, with
  // respect to every parameter tensor and the input.
  const auto cfg = gradcheck_model_config();
  const auto params = gradcheck_model_params(cfg, 11);
  std::vector<GradInput> inputs;
  inputs.push_back({"input", U({1, 1, 8, 8}, 0.0, 1.0), true});
  inputs.push_back({"target", U({1, 1, 8, 8}, 0.0, 1.0), false});
  std::vector<std::string> names;
  for (const auto& e : params.entries()) {
    inputs.push_back({e.name, e.value, true});
    names.push_back(e.name);
  }
  out.push_back(check_gradients(
      "sadnet(2-scale micro)", std::move(inputs),
      [cfg, names](Tape<double>&, const V& v) {
        BoundParams<double> bound;
        for (std::size_t i = 0; i < names.size(); ++i) bound.set(names[i], v[i + 2]);
        const auto y = sadnet_forward(v[0], cfg, bound).output;
        return loss(LossKind::L2, y, v[1]);
      },
      opt));
  return out;
}

// Prints one line per check and returns the names of the failures.
inline std::vector<std::string> report_gradchecks(const std::vector<GradCheckResult>& results, std::ostream& os) {
  std::vector<std::string> failed;
  for (const auto& r : results) {
    os << (r.pass ? "PASS  " : "FAIL  ") << std::left << std::setw(30) << r.name << std::right
       << " worst_rel " << std::scientific << std::setprecision(3) << r.worst << std::defaultfloat
       << "  n=" << r.checked;
    if (!r.pass) os << "  at " << r.worst_at;
    os << '\n';
    if (!r.pass) failed.push_back(r.name);
  }
  return failed;
}

}  // namespace sadnet
