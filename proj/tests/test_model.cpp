#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "test_util.hpp"

using namespace sadnet;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

std::map<std::string, std::string> summary_fields(const std::string& report) {
  std::map<std::string, std::string> out;
  std::istringstream is(report);
  std::string line;
  while (std::getline(is, line) && !line.empty()) {
    const auto tab = line.find('\t');
    if (tab != std::string::npos) out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

ConvParams<double> leaf_conv(Tape<double>& tape, Shape4 w, std::uint64_t seed, ConvGeometry g, double scale = 0.3) {
  return ConvParams<double>{tape.constant(random_tensor(w, seed, -scale, scale)),
                            tape.constant(random_tensor(Shape4{1, w.n, 1, 1}, seed + 1, -0.1, 0.1)), g};
}

}  // namespace

TEST(ModelConfig, DefaultsAndValidation) {
  const ModelConfig c;
  EXPECT_EQ(c.scales, 4u);
  EXPECT_EQ(c.channels_per_scale, (std::vector<std::size_t>{32, 64, 128, 256}));
  EXPECT_EQ(c.context_dilations, (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(c.context_compression, 4u);
  EXPECT_DOUBLE_EQ(c.leaky_slope, 0.2);
  EXPECT_EQ(c.size_divisor(), 8u);
  EXPECT_NO_THROW(c.validate());

  auto bad = c;
  bad.channels_per_scale = {32, 64, 128};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.context_compression = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.kernel_size = 4;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.in_channels = 2;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Params, SpecsUniqueAndCountMatchesAccounting) {
  for (const auto& cfg : {ModelConfig{}, ModelConfig::micro(1), gradcheck_model_config()}) {
    const auto specs = param_specs(cfg);
    std::set<std::string> names;
    std::size_t total = 0;
    for (const auto& s : specs) {
      EXPECT_TRUE(names.insert(s.name).second) << s.name;
      total += s.shape.numel();
    }
    const auto store = init_params<float>(cfg, 1);
    EXPECT_EQ(store.element_count(), total);
    EXPECT_EQ(count_params_flops(cfg, Shape4{1, cfg.in_channels, 64, 64}).params, total);
  }
}

TEST(Params, HeadsAndTailStartAtZero) {
  const auto store = init_params<double>(ModelConfig{}, 5);
  std::size_t zero_tensors = 0;
  for (const auto& e : store.entries()) {
    const bool zero_init = e.name.find(".offset.head.") != std::string::npos || e.name.rfind("tail.", 0) == 0;
    const bool bias = e.name.ends_with(".bias");
    bool all_zero = true;
    for (auto v : e.value.vec()) all_zero = all_zero && v == 0.0;
    if (zero_init || bias) {
      EXPECT_TRUE(all_zero) << e.name;
      zero_tensors += zero_init;
    } else {
      EXPECT_FALSE(all_zero) << e.name;
    }
  }
  // four offset heads (weight + bias) and the tail (weight + bias)
  EXPECT_EQ(zero_tensors, 10u);
}

TEST(Params, SeedReproducible) {
  EXPECT_TRUE(init_params<float>(ModelConfig::micro(), 9) == init_params<float>(ModelConfig::micro(), 9));
  EXPECT_FALSE(init_params<float>(ModelConfig::micro(), 9) == init_params<float>(ModelConfig::micro(), 10));
}

TEST(Accounting, DefaultModelNearPublishedFigures) {
  const auto r = count_params_flops(ModelConfig{}, Shape4{1, 3, 320, 480});
  const double params = static_cast<double>(r.params);
  const double gflops = static_cast<double>(r.flops) / 1e9;
  EXPECT_NEAR(params, 4.321e6, 0.25 * 4.321e6);
  EXPECT_NEAR(gflops, 50.1, 0.30 * 50.1);
}

TEST(Accounting, InspectReportFields) {
  const auto f = summary_fields(inspect_report(ModelConfig{}, 320, 480));
  EXPECT_EQ(f.at("channels_per_scale"), "32,64,128,256");
  EXPECT_EQ(f.at("context_dilations"), "1,2,3,4");
  EXPECT_EQ(f.at("context_compression"), "4");
  EXPECT_EQ(f.at("head_kernel"), "1x1");
  EXPECT_EQ(f.at("tail_kernel"), "1x1");
  EXPECT_EQ(f.at("down_kernel"), "2x2/2");
  EXPECT_EQ(f.at("up_kernel"), "2x2/2");
  EXPECT_EQ(f.at("kernel_size"), "3x3");
  EXPECT_EQ(f.at("input"), "480x320x3");
  EXPECT_EQ(std::stoull(f.at("params")), count_params_flops(ModelConfig{}, Shape4{1, 3, 320, 480}).params);
}

TEST(Accounting, FlopsScaleWithArea) {
  const auto a = count_params_flops(ModelConfig::micro(), Shape4{1, 1, 32, 32}).flops;
  const auto b = count_params_flops(ModelConfig::micro(), Shape4{1, 1, 64, 64}).flops;
  EXPECT_EQ(b, 4 * a);
}

TEST(Blocks, ResBlockShapeAndIdentityWithZeroSecondConv) {
  Tape<double> tape;
  const auto xv = random_tensor(Shape4{2, 4, 6, 6}, 1);
  auto x = tape.constant(xv);
  const auto same = ConvGeometry::same(3);
  auto c1 = leaf_conv(tape, Shape4{4, 4, 3, 3}, 2, same);
  ConvParams<double> c2{tape.constant(Tensor4<double>(Shape4{4, 4, 3, 3})), std::nullopt, same};
  auto y = resblock_forward(x, ResBlockWeights<double>{c1, c2}, 0.2);
  EXPECT_EQ(y.value(), xv);
  auto wrong = leaf_conv(tape, Shape4{3, 4, 3, 3}, 3, same);
  EXPECT_THROW(resblock_forward(x, ResBlockWeights<double>{wrong, c2}, 0.2), ConfigError);
}

TEST(Blocks, RsabWithZeroOffsetsUnitMasksIsResBlock) {
  Tape<double> tape;
  auto x = tape.constant(random_tensor(Shape4{1, 3, 6, 6}, 4));
  const auto same = ConvGeometry::same(3);
  auto c1 = leaf_conv(tape, Shape4{3, 3, 3, 3}, 5, same);
  auto c2 = leaf_conv(tape, Shape4{3, 3, 3, 3}, 7, same);
  OffsetField<double> f{tape.constant(Tensor4<double>(Shape4{1, 18, 6, 6})),
                        tape.constant(Tensor4<double>(Shape4{1, 9, 6, 6}, 1.0))};
  auto a = rsab_forward(x, f, RsabWeights<double>{c1, c2}, 0.2);
  auto b = resblock_forward(x, ResBlockWeights<double>{c1, c2}, 0.2);
  EXPECT_LT(max_abs_diff(a.value(), b.value()), 1e-12);
}

TEST(Blocks, UpsampleOffsetsConstantField) {
  Xoshiro256 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const double c = -3.0 + 6.0 * rng.uniform();
    const double m = rng.uniform();
    Tape<double> tape;
    OffsetField<double> f{tape.constant(Tensor4<double>(Shape4{1, 18, 5, 7}, c)),
                          tape.constant(Tensor4<double>(Shape4{1, 9, 5, 7}, m))};
    const auto up = upsample_offsets(f);
    ASSERT_EQ(up.offsets.shape(), (Shape4{1, 18, 10, 14}));
    ASSERT_EQ(up.masks.shape(), (Shape4{1, 9, 10, 14}));
    for (auto v : up.offsets.value().vec()) EXPECT_NEAR(v, 2.0 * c, 1e-12);
    for (auto v : up.masks.value().vec()) EXPECT_NEAR(v, m, 1e-12);
  }
}

TEST(Blocks, UpsampleBilinearHalfPixelCentres) {
  // a horizontal ramp 0, 1, 2, 3 maps to -0.25 .. 3.25 with edges clamped
  Tape<double> tape;
  Tensor4<double> ramp(Shape4{1, 1, 1, 4}, std::vector<double>{0, 1, 2, 3});
  const auto y = upsample_bilinear2x(tape.constant(ramp)).value();
  const std::vector<double> expect{0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(y.at(0, 0, 0, i), expect[i], 1e-12) << i;
}

TEST(Blocks, OffsetTransferShapesAndMaskRange) {
  Tape<double> tape;
  const auto same = ConvGeometry::same(3);
  auto x = tape.constant(random_tensor(Shape4{2, 4, 8, 8}, 10));
  OffsetTransferWeights<double> w0{leaf_conv(tape, Shape4{5, 4, 3, 3}, 11, same),
                                   leaf_conv(tape, Shape4{27, 5, 3, 3}, 13, same, 3.0)};
  const auto coarse = offset_transfer<double>(x, std::nullopt, w0, 0.2, 9);
  EXPECT_EQ(coarse.offsets.shape(), (Shape4{2, 18, 8, 8}));
  EXPECT_EQ(coarse.masks.shape(), (Shape4{2, 9, 8, 8}));
  for (auto v : coarse.masks.value().vec()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  auto fine_x = tape.constant(random_tensor(Shape4{2, 4, 16, 16}, 15));
  OffsetTransferWeights<double> w1{leaf_conv(tape, Shape4{5, 4, 3, 3}, 16, same),
                                   leaf_conv(tape, Shape4{27, 5 + 27, 3, 3}, 18, same)};
  const auto fine = offset_transfer<double>(fine_x, coarse, w1, 0.2, 9);
  EXPECT_EQ(fine.offsets.shape(), (Shape4{2, 18, 16, 16}));
  auto odd_x = tape.constant(random_tensor(Shape4{2, 4, 12, 16}, 20));
  EXPECT_THROW(offset_transfer<double>(odd_x, coarse, w1, 0.2, 9), ConfigError);
}

TEST(Blocks, ZeroHeadGivesZeroOffsetsHalfMasks) {
  Tape<double> tape;
  const auto same = ConvGeometry::same(3);
  auto x = tape.constant(random_tensor(Shape4{1, 4, 6, 6}, 1));
  OffsetTransferWeights<double> w{leaf_conv(tape, Shape4{5, 4, 3, 3}, 2, same),
                                  ConvParams<double>{tape.constant(Tensor4<double>(Shape4{27, 5, 3, 3})),
                                                     tape.constant(Tensor4<double>(Shape4{1, 27, 1, 1})), same}};
  const auto f = offset_transfer<double>(x, std::nullopt, w, 0.2, 9);
  for (auto v : f.offsets.value().vec()) EXPECT_EQ(v, 0.0);
  for (auto v : f.masks.value().vec()) EXPECT_EQ(v, 0.5);
}

TEST(Blocks, ContextBlockShapesAndZeroFuseIdentity) {
  Tape<double> tape;
  const auto xv = random_tensor(Shape4{1, 16, 6, 6}, 30);
  auto x = tape.constant(xv);
  ContextBlockWeights<double> w{leaf_conv(tape, Shape4{4, 16, 1, 1}, 31, {}), {},
                                ConvParams<double>{tape.constant(Tensor4<double>(Shape4{16, 16, 1, 1})), std::nullopt, {}}};
  for (std::size_t d = 1; d <= 4; ++d) w.branches.push_back(leaf_conv(tape, Shape4{4, 4, 3, 3}, 40 + d, ConvGeometry::same(3, d)));
  EXPECT_EQ(context_block_forward(x, w, 0.2, 4).value(), xv);
  EXPECT_THROW(context_block_forward(x, w, 0.2, 3), ConfigError);
  w.fuse = leaf_conv(tape, Shape4{16, 16, 1, 1}, 50, {});
  EXPECT_EQ(context_block_forward(x, w, 0.2, 4).shape(), xv.shape());
}

TEST(Network, IdentityAtInitialisation) {
  const ModelConfig cfg;
  const auto params = init_params<double>(cfg, 1);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto x = random_tensor(Shape4{1, 3, 32, 40}, 100 + s, 0.0, 1.0);
    EXPECT_EQ(sadnet_infer(x, cfg, params), x);
  }
}

TEST(Network, EncoderShapesPerScale) {
  const auto cfg = ModelConfig::micro(3);
  Tape<float> tape;
  BoundParams<float> bound(tape, init_params<float>(cfg, 2), false);
  const auto fwd = sadnet_forward(tape.constant(Tensor4<float>(Shape4{2, 3, 64, 48})), cfg, bound);
  ASSERT_EQ(fwd.encoder_shapes.size(), 4u);
  for (std::size_t s = 0; s < 4; ++s) {
    EXPECT_EQ(fwd.encoder_shapes[s], (Shape4{2, cfg.channels_per_scale[s], 64u >> s, 48u >> s}));
    EXPECT_EQ(fwd.scales[s].field.offsets.shape(), (Shape4{2, 18, 64u >> s, 48u >> s}));
    EXPECT_EQ(fwd.scales[s].field.masks.shape(), (Shape4{2, 9, 64u >> s, 48u >> s}));
  }
  EXPECT_EQ(fwd.output.shape(), (Shape4{2, 3, 64, 48}));
}

TEST(Network, InputSizeErrors) {
  const auto cfg = ModelConfig::micro(1);
  const auto params = init_params<float>(cfg, 2);
  try {
    sadnet_infer(Tensor4<float>(Shape4{1, 1, 20, 16}), cfg, params);
    FAIL();
  } catch (const UsageError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("8"), std::string::npos);
    EXPECT_NE(msg.find("pad"), std::string::npos);
  }
  EXPECT_THROW(sadnet_infer(Tensor4<float>(Shape4{1, 3, 16, 16}), cfg, params), ConfigError);
}

TEST(Network, FixtureForwardIsFinite) {
  const auto cfg = gradcheck_model_config();
  const auto params = gradcheck_model_params(cfg, 3);
  const auto out = sadnet_infer(random_tensor(Shape4{1, 1, 8, 8}, 4, 0.0, 1.0), cfg, params);
  for (auto v : out.vec()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Gradcheck, FixtureStaysAwayFromKinks) {
  const auto cfg = gradcheck_model_config();
  const auto params = gradcheck_model_params(cfg, 11);
  Tape<double> tape;
  BoundParams<double> bound(tape, params);
  sadnet_forward(tape.constant(random_tensor(Shape4{1, 1, 8, 8}, 12, 0.0, 1.0)), cfg, bound);
  const auto m = kink_margin(tape);
  EXPECT_GE(m.leaky, 0.01);
  EXPECT_GE(m.sampling, 0.01);
}

TEST(Gradcheck, ModelSuitePasses) {
  const auto results = gradcheck_model();
  ASSERT_EQ(results.size(), 5u);
  for (const auto& r : results) EXPECT_TRUE(r.pass) << r.name << " worst " << r.worst << " at " << r.worst_at;
}
