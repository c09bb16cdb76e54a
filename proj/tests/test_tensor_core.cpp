#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace sadnet;
using testutil::max_abs_diff;
using testutil::max_rel_diff;
using testutil::random_tensor;

namespace {

ConvParams<double> bound_conv(Tape<double>& tape, const Tensor4<double>& w, const Tensor4<double>* b,
                              ConvGeometry g, bool rg = false) {
  ConvParams<double> p{tape.leaf(w, rg), std::nullopt, g};
  if (b) p.bias = tape.leaf(*b, rg);
  return p;
}

}  // namespace

TEST(Tensor, ShapeAndStorage) {
  Tensor4<float> t(Shape4{2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  t.at(1, 2, 3, 4) = 7.0f;
  EXPECT_EQ(t[t.size() - 1], 7.0f);
  EXPECT_THROW(Tensor4<float>(Shape4{1, 1, 2, 2}, std::vector<float>(3)), ConfigError);
}

TEST(Conv2d, SumKernelOnOnes) {
  Tape<double> tape;
  auto x = tape.constant(Tensor4<double>(Shape4{1, 1, 3, 3}, 1.0));
  auto w = Tensor4<double>(Shape4{1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, bound_conv(tape, w, nullptr, {}));
  ASSERT_EQ(y.shape(), (Shape4{1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 9.0);
}

TEST(Conv2d, IdentityKernel) {
  Tape<double> tape;
  auto xv = random_tensor(Shape4{2, 1, 5, 4}, 3);
  auto x = tape.constant(xv);
  Tensor4<double> w(Shape4{1, 1, 1, 1}, 1.0);
  Tensor4<double> b(Shape4{1, 1, 1, 1}, 0.0);
  auto y = conv2d(x, bound_conv(tape, w, &b, {}));
  EXPECT_EQ(y.value(), xv);
}

TEST(Conv2d, MatchesNestedLoopReference) {
  Tape<double> tape;
  const auto xv = random_tensor(Shape4{2, 3, 8, 8}, 11);
  const auto wv = random_tensor(Shape4{4, 3, 3, 3}, 12);
  const auto bv = random_tensor(Shape4{1, 4, 1, 1}, 13);
  const auto g = ConvGeometry::same(3);
  auto y = conv2d(tape.constant(xv), bound_conv(tape, wv, &bv, g));
  EXPECT_LT(max_rel_diff(y.value(), testutil::reference_conv(xv, wv, &bv, g)), 1e-6);
}

TEST(Conv2d, PropertyRandomGeometries) {
  Xoshiro256 rng(99);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t k = 1 + rng.below(3);
    const std::size_t stride = 1 + rng.below(2);
    const std::size_t dil = 1 + rng.below(4);
    const std::size_t pad = rng.below(5);
    const std::size_t span = dil * (k - 1) + 1;
    const std::size_t h = std::max<std::size_t>(span, 3 + rng.below(6));
    const std::size_t w = std::max<std::size_t>(span, 3 + rng.below(6));
    const Shape4 xs{1 + rng.below(2), 1 + rng.below(3), h, w};
    const Shape4 wsh{1 + rng.below(3), xs.c, k, k};
    const ConvGeometry g{{stride, stride}, {dil, dil}, {pad, pad}};
    const auto xv = random_tensor(xs, 1000 + trial);
    const auto wv = random_tensor(wsh, 2000 + trial);
    const auto bv = random_tensor(Shape4{1, wsh.n, 1, 1}, 3000 + trial);
    Tape<double> tape;
    auto y = conv2d(tape.constant(xv), bound_conv(tape, wv, &bv, g));
    EXPECT_LT(max_rel_diff(y.value(), testutil::reference_conv(xv, wv, &bv, g)), 1e-6)
        << "k=" << k << " s=" << stride << " d=" << dil << " p=" << pad;
  }
}

TEST(Conv2d, Linearity) {
  const auto x = random_tensor(Shape4{1, 2, 6, 6}, 21);
  const auto z = random_tensor(Shape4{1, 2, 6, 6}, 22);
  const auto w = random_tensor(Shape4{3, 2, 3, 3}, 23);
  const double a = 1.7, b = -0.6;
  Tensor4<double> mix(x.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * z[i];
  Tape<double> tape;
  const auto g = ConvGeometry::same(3);
  auto p = bound_conv(tape, w, nullptr, g);
  const auto lhs = conv2d(tape.constant(mix), p).value();
  const auto cx = conv2d(tape.constant(x), p).value();
  const auto cz = conv2d(tape.constant(z), p).value();
  Tensor4<double> rhs(lhs.shape());
  for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = a * cx[i] + b * cz[i];
  EXPECT_LT(max_rel_diff(lhs, rhs), 1e-6);
}

TEST(Conv2d, ChannelMismatchNamesShapes) {
  Tape<double> tape;
  auto x = tape.constant(Tensor4<double>(Shape4{1, 2, 4, 4}));
  Tensor4<double> w(Shape4{1, 3, 3, 3});
  try {
    conv2d(x, bound_conv(tape, w, nullptr, {}));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(1, 2, 4, 4)"), std::string::npos);
    EXPECT_NE(msg.find("(1, 3, 3, 3)"), std::string::npos);
  }
}

TEST(ConvTranspose, DisjointStrideTwoBlocks) {
  Tape<double> tape;
  Tensor4<double> xv(Shape4{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor4<double> w(Shape4{1, 1, 2, 2}, 1.0);
  auto y = conv2d_transpose(tape.constant(xv), bound_conv(tape, w, nullptr, {{2, 2}, {1, 1}, {0, 0}}));
  ASSERT_EQ(y.shape(), (Shape4{1, 1, 4, 4}));
  for (std::size_t yy = 0; yy < 4; ++yy)
    for (std::size_t xx = 0; xx < 4; ++xx) EXPECT_EQ(y.value().at(0, 0, yy, xx), xv.at(0, 0, yy / 2, xx / 2));
}

TEST(ConvTranspose, DownThenUpRestoresSize) {
  Tape<double> tape;
  const ConvGeometry g{{2, 2}, {1, 1}, {0, 0}};
  for (std::size_t hw : {2u, 8u, 14u}) {
    auto x = tape.constant(random_tensor(Shape4{1, 2, hw, hw + 2}, hw));
    auto down = conv2d(x, bound_conv(tape, random_tensor(Shape4{4, 2, 2, 2}, 1), nullptr, g));
    auto up = conv2d_transpose(down, bound_conv(tape, random_tensor(Shape4{4, 2, 2, 2}, 2), nullptr, g));
    EXPECT_EQ(up.shape(), x.shape());
  }
}

TEST(ConvTranspose, MatchesScatterReference) {
  for (auto g : {ConvGeometry{{2, 2}, {1, 1}, {0, 0}}, ConvGeometry{{1, 1}, {1, 1}, {1, 1}},
                 ConvGeometry{{2, 2}, {2, 2}, {1, 1}}}) {
    const auto xv = random_tensor(Shape4{2, 3, 4, 5}, 31);
    const auto wv = random_tensor(Shape4{3, 2, 3, 3}, 32);
    const auto bv = random_tensor(Shape4{1, 2, 1, 1}, 33);
    Tape<double> tape;
    auto y = conv2d_transpose(tape.constant(xv), bound_conv(tape, wv, &bv, g));
    EXPECT_LT(max_rel_diff(y.value(), testutil::reference_conv_transpose(xv, wv, &bv, g)), 1e-6);
  }
}

TEST(ConvTranspose, InputGradientIsConvolution) {
  const ConvGeometry g{{2, 2}, {1, 1}, {0, 0}};
  const auto xv = random_tensor(Shape4{1, 3, 4, 4}, 41);
  const auto wv = random_tensor(Shape4{3, 2, 2, 2}, 42);
  const auto gy = random_tensor(Shape4{1, 2, 8, 8}, 43);
  Tape<double> tape;
  auto x = tape.leaf(xv);
  auto y = conv2d_transpose(x, bound_conv(tape, wv, nullptr, g));
  auto L = sum(mul(y, tape.constant(gy)));
  const auto grads = backward(L);
  // (in, out, kh, kw) read as a conv weight maps out -> in channels
  Tape<double> t2;
  auto expect = conv2d(t2.constant(gy), bound_conv(t2, wv, nullptr, g)).value();
  EXPECT_LT(max_rel_diff(grads.at(x), expect), 1e-12);
}

TEST(Pointwise, Definitions) {
  Tape<double> tape;
  auto x = tape.constant(Tensor4<double>(Shape4{1, 1, 1, 2}, std::vector<double>{-1.0, 0.0}));
  EXPECT_DOUBLE_EQ(leaky_relu(x, 0.2).value()[0], -0.2);
  EXPECT_DOUBLE_EQ(sigmoid(x).value()[1], 0.5);
  auto a = tape.constant(Tensor4<double>(Shape4{1, 32, 16, 16}));
  auto b = tape.constant(Tensor4<double>(Shape4{1, 64, 16, 16}));
  EXPECT_EQ(concat_channels<double>({a, b}).shape(), (Shape4{1, 96, 16, 16}));
  EXPECT_THROW(add(a, b), ConfigError);
  EXPECT_THROW(mul(a, b), ConfigError);
  auto c = tape.constant(Tensor4<double>(Shape4{1, 8, 8, 16}));
  EXPECT_THROW(concat_channels<double>({a, c}), ConfigError);
}

TEST(Pointwise, CropOrPadAndSlice) {
  Tape<double> tape;
  const auto xv = random_tensor(Shape4{1, 3, 4, 4}, 5);
  auto x = tape.constant(xv);
  auto p = crop_or_pad(x, 3, 6).value();
  EXPECT_EQ(p.shape(), (Shape4{1, 3, 3, 6}));
  EXPECT_EQ(p.at(0, 2, 2, 3), xv.at(0, 2, 2, 3));
  EXPECT_EQ(p.at(0, 2, 2, 5), 0.0);
  auto s = slice_channels(x, 1, 2).value();
  EXPECT_EQ(s.at(0, 0, 1, 1), xv.at(0, 1, 1, 1));
}

TEST(Loss, IdentityAndConstantOffset) {
  Tape<double> tape;
  const auto tv = random_tensor(Shape4{2, 3, 4, 4}, 7);
  auto t = tape.constant(tv);
  EXPECT_EQ(loss(LossKind::L1, t, t).value()[0], 0.0);
  EXPECT_EQ(loss(LossKind::L2, t, t).value()[0], 0.0);
  auto pv = tv;
  for (auto& v : pv.vec()) v += 2.0;
  auto p = tape.constant(pv);
  EXPECT_NEAR(loss(LossKind::L1, p, t).value()[0], 2.0, 1e-12);
  EXPECT_NEAR(loss(LossKind::L2, p, t).value()[0], 4.0, 1e-12);
}

TEST(Loss, MatchesScalarLoop) {
  const auto pv = random_tensor(Shape4{2, 3, 5, 5}, 8);
  const auto tv = random_tensor(Shape4{2, 3, 5, 5}, 9);
  double l1 = 0.0, l2 = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    l1 += std::abs(pv[i] - tv[i]);
    l2 += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  }
  l1 /= static_cast<double>(pv.size());
  l2 /= static_cast<double>(pv.size());
  Tape<double> tape;
  EXPECT_NEAR(loss(LossKind::L1, tape.constant(pv), tape.constant(tv)).value()[0], l1, 1e-9);
  EXPECT_NEAR(loss(LossKind::L2, tape.constant(pv), tape.constant(tv)).value()[0], l2, 1e-9);
  EXPECT_THROW(loss(LossKind::L2, tape.constant(pv), tape.constant(Tensor4<double>(Shape4{1, 1, 1, 1}))),
               ConfigError);
}

TEST(Loss, L1SubgradientAtTieIsZero) {
  Tape<double> tape;
  const auto tv = random_tensor(Shape4{1, 1, 2, 2}, 10);
  auto p = tape.leaf(tv);
  const auto g = backward(loss(LossKind::L1, p, tape.constant(tv)));
  for (auto v : g.at(p).vec()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  auto x = tape.leaf(random_tensor(Shape4{2, 3, 4, 5}, 1));
  const auto g = backward(sum(x));
  for (auto v : g.at(x).vec()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, ConvWeightsMatchFiniteDifferences) {
  const auto xv = random_tensor(Shape4{1, 2, 5, 5}, 51);
  const auto wv = random_tensor(Shape4{3, 2, 3, 3}, 52);
  const auto tv = random_tensor(Shape4{1, 3, 5, 5}, 53);
  const auto g = ConvGeometry::same(3);
  auto f = [&](const Tensor4<double>& w) {
    Tape<double> tape;
    auto y = conv2d(tape.constant(xv), bound_conv(tape, w, nullptr, g));
    return loss(LossKind::L2, y, tape.constant(tv)).value()[0];
  };
  Tape<double> tape;
  auto w = tape.leaf(wv);
  auto L = loss(LossKind::L2, conv2d(tape.constant(xv), ConvParams<double>{w, std::nullopt, g}), tape.constant(tv));
  const auto analytic = backward(L).at(w);
  const double h = 1e-3;
  for (std::size_t i = 0; i < wv.size(); ++i) {
    auto wp = wv, wm = wv;
    wp[i] += h;
    wm[i] -= h;
    const double fd = (f(wp) - f(wm)) / (2 * h);
    EXPECT_LT(std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-2}), 1e-4) << i;
  }
}

TEST(Backward, DetachedLeafAbsent) {
  Tape<double> tape;
  auto x = tape.leaf(random_tensor(Shape4{1, 1, 3, 3}, 1));
  auto c = tape.leaf(random_tensor(Shape4{1, 1, 3, 3}, 2), false);
  const auto g = backward(sum(mul(x, c)));
  EXPECT_TRUE(g.contains(x));
  EXPECT_FALSE(g.contains(c));
  EXPECT_EQ(g.size(), 1u);
}

TEST(Backward, NonScalarLossRejected) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor4<double>(Shape4{1, 1, 2, 2}));
  EXPECT_THROW(backward(x), UsageError);
}

TEST(Backward, ReachableLeavesHaveMatchingShapes) {
  Tape<double> tape;
  auto x = tape.leaf(random_tensor(Shape4{2, 2, 4, 4}, 1));
  auto w = tape.leaf(random_tensor(Shape4{3, 2, 3, 3}, 2));
  auto unused = tape.leaf(random_tensor(Shape4{1, 5, 1, 1}, 3));
  const auto g = backward(sum(conv2d(x, ConvParams<double>{w, std::nullopt, ConvGeometry::same(3)})));
  EXPECT_EQ(g.at(x).shape(), x.shape());
  EXPECT_EQ(g.at(w).shape(), w.shape());
  EXPECT_EQ(g.at(unused).shape(), unused.shape());
}

TEST(Backward, BitwiseDeterministic) {
  auto run = [] {
    Tape<float> tape;
    auto params = init_params<float>(ModelConfig::micro(1), 3);
    for (auto& e : params.entries())
      for (auto& v : e.value.vec()) v += 0.01f;
    BoundParams<float> bound(tape, params);
    auto x = tape.constant(random_tensor<float>(Shape4{2, 1, 16, 16}, 4, 0.0, 1.0));
    auto t = tape.constant(random_tensor<float>(Shape4{2, 1, 16, 16}, 5, 0.0, 1.0));
    auto L = loss(LossKind::L2, sadnet_forward(x, ModelConfig::micro(1), bound).output, t);
    return named_gradients(backward(L), bound);
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, g] : a) EXPECT_TRUE(g == b.at(name)) << name;
}

TEST(Backward, ThreadCountDoesNotChangeGradients) {
  auto run = [](int threads) {
    set_thread_count(threads);
    Tape<float> tape;
    auto x = tape.leaf(random_tensor<float>(Shape4{4, 3, 8, 8}, 1));
    auto w = tape.leaf(random_tensor<float>(Shape4{5, 3, 3, 3}, 2));
    auto y = conv2d(x, ConvParams<float>{w, std::nullopt, ConvGeometry::same(3)});
    auto L = sum(mul(y, tape.constant(random_tensor<float>(y.shape(), 3))));
    const auto g = backward(L);
    return std::make_pair(g.at(x), g.at(w));
  };
  const int before = thread_count();
  const auto one = run(1);
  const auto four = run(4);
  set_thread_count(before);
  EXPECT_TRUE(one.first == four.first);
  EXPECT_TRUE(one.second == four.second);
}

TEST(Adam, FirstStepMagnitudeIsLr) {
  ParamStore<double> params;
  params.add("w", Tensor4<double>(Shape4{1, 1, 2, 3}, 0.5));
  GradMap<double> grads{{"w", Tensor4<double>(Shape4{1, 1, 2, 3}, std::vector<double>{1, -2, 3, -0.5, 7, -9})}};
  auto state = AdamState<double>::for_params(params);
  adam_step(params, grads, state, 1e-4);
  EXPECT_EQ(state.t, 1u);
  const auto& g = grads.at("w");
  for (std::size_t i = 0; i < g.size(); ++i) {
    // m_hat / sqrt(v_hat) = g / |g| on the first step, up to eps
    const double expected = 0.5 - 1e-4 * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(params.at("w")[i], expected, 1e-6);
    EXPECT_NEAR(std::abs(params.at("w")[i] - 0.5), 1e-4, 1e-6);
  }
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  ParamStore<double> params;
  params.add("w", random_tensor(Shape4{1, 2, 2, 2}, 1));
  const auto before = params.at("w");
  GradMap<double> grads{{"w", Tensor4<double>(Shape4{1, 2, 2, 2})}};
  auto state = AdamState<double>::for_params(params);
  adam_step(params, grads, state, 1e-4);
  adam_step(params, grads, state, 1e-4);
  EXPECT_EQ(params.at("w"), before);
  EXPECT_EQ(state.t, 2u);
}

TEST(Adam, MissingGradientNamesParameter) {
  ParamStore<double> params;
  params.add("dec0.rsab0.conv.weight", Tensor4<double>(Shape4{1, 1, 1, 1}));
  AdamState<double> state;
  try {
    adam_step(params, GradMap<double>{}, state, 1e-4);
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("dec0.rsab0.conv.weight"), std::string::npos);
  }
}

TEST(Adam, Defaults) {
  const AdamHyper h;
  EXPECT_EQ(h.lr, 1e-4);
  EXPECT_EQ(h.beta1, 0.9);
  EXPECT_EQ(h.beta2, 0.999);
  EXPECT_EQ(h.eps, 1e-8);
}

TEST(Gradcheck, OpsSuitePasses) {
  for (const auto& r : gradcheck_ops()) {
    EXPECT_TRUE(r.pass) << r.name << " worst " << r.worst << " at " << r.worst_at;
    EXPECT_LE(r.worst, 1e-4) << r.name;
    EXPECT_GT(r.checked, 0u);
  }
}

// A conv2d whose recorded weight gradient is off by 10%: the checker must
// flag it by name.
TEST(Gradcheck, CorruptedConvBackwardIsReported) {
  auto corrupted_conv = [](const Var<double>& x, const Var<double>& w) {
    auto& tape = x.tape();
    Tape<double> scratch;
    auto ref = conv2d(scratch.constant(x.value()),
                      ConvParams<double>{scratch.constant(w.value()), std::nullopt, ConvGeometry::same(3)});
    const std::size_t xid = x.id(), wid = w.id();
    return tape.record("conv2d", ref.value(), {x, w}, [xid, wid](Tape<double>& t, std::size_t self) {
      Tape<double> inner;
      auto xi = inner.leaf(t.value(xid));
      auto wi = inner.leaf(t.value(wid));
      auto y = conv2d(xi, ConvParams<double>{wi, std::nullopt, ConvGeometry::same(3)});
      const auto g = backward(sum(mul(y, inner.constant(*t.grad(self)))));
      auto gw = g.at(wi);
      for (auto& v : gw.vec()) v *= 1.1;
      t.accumulate(xid, g.at(xi));
      t.accumulate(wid, gw);
    });
  };
  std::vector<GradInput> inputs{{"x", random_tensor(Shape4{1, 2, 5, 5}, 1)}, {"weight", random_tensor(Shape4{2, 2, 3, 3}, 2)}};
  const auto r = check_gradients("conv2d", inputs, [&](Tape<double>& t, const std::vector<Var<double>>& v) {
    return sum(mul(corrupted_conv(v[0], v[1]), t.constant(random_tensor(Shape4{1, 2, 5, 5}, 3))));
  });
  std::ostringstream os;
  const auto failed = report_gradchecks({r}, os);
  ASSERT_EQ(failed.size(), 1u);
  EXPECT_EQ(failed[0], "conv2d");
  EXPECT_NE(os.str().find("FAIL  conv2d"), std::string::npos);
  EXPECT_NE(r.worst_at.find("weight"), std::string::npos);
}
