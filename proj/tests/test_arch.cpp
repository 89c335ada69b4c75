#include <gtest/gtest.h>

#include <json.hpp>

#include "mobileone/arch.hpp"
#include "mobileone/kernels.hpp"
#include "mobileone/reparam.hpp"
#include "mobileone/serialize.hpp"
#include "oracles.hpp"

using namespace mobileone;

TEST(VariantSpec, S0Table) {
  const auto s = variant_spec("S0");
  ASSERT_EQ(s.stages.size(), 6u);
  const double alpha[] = {0.75, 0.75, 1.0, 1.0, 1.0, 2.0};
  const int blocks[] = {1, 2, 8, 5, 5, 1};
  const int base[] = {64, 64, 128, 256, 256, 512};
  const int stride[] = {2, 2, 2, 2, 1, 2};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(s.stages[i].alpha, alpha[i]);
    EXPECT_EQ(s.stages[i].blocks, blocks[i]);
    EXPECT_EQ(s.stages[i].base_channels, base[i]);
    EXPECT_EQ(s.stages[i].stride, stride[i]);
    EXPECT_EQ(s.stages[i].k, 4);
    EXPECT_EQ(s.stages[i].activation, Activation::relu);
  }
  EXPECT_EQ(s.feature_width(), 1024u);
}

TEST(VariantSpec, S4UsesSeInLastTwoStages) {
  const auto s = variant_spec("S4");
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(s.stages[i].k, 1);
    EXPECT_EQ(s.stages[i].activation, i >= 4 ? Activation::se_relu : Activation::relu);
  }
}

TEST(VariantSpec, Mu1Table) {
  const auto s = variant_spec("μ1");
  EXPECT_EQ(s.name, "mu1");
  const int blocks[] = {1, 2, 6, 4, 4, 1};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(s.stages[i].blocks, blocks[i]);
    EXPECT_EQ(s.stages[i].k, 2);
    EXPECT_EQ(s.stages[i].alpha, i == 5 ? 1.0 : 0.75);
  }
}

TEST(VariantSpec, UnknownNameListsValid) {
  try {
    variant_spec("S9");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const auto& v : variant_names()) EXPECT_NE(msg.find(v), std::string::npos) << v;
  }
}

TEST(VariantSpec, JsonRoundTrip) {
  for (const auto& v : variant_names()) {
    const auto s = variant_spec(v);
    const auto back = arch_from_json(arch_to_json(s));
    EXPECT_EQ(arch_to_json(back), arch_to_json(s));
  }
  EXPECT_THROW(arch_from_json("{\"name\": 3}"), ConfigError);
  EXPECT_THROW(arch_from_json("not json"), ConfigError);
}

TEST(BuildModel, S0LayerCount) {
  const auto m = build_model<float>(variant_spec("S0"), ModelMode::train);
  EXPECT_EQ(m.block_count(), 22u);
  EXPECT_EQ(m.layers.size(), 24u);
  EXPECT_TRUE(std::holds_alternative<AvgPool>(m.layers[22]));
  EXPECT_TRUE(std::holds_alternative<Linear<float>>(m.layers[23]));
  EXPECT_EQ(m.num_classes(), 1000u);
}

TEST(BuildModel, InferenceS0ShapeContract) {
  const auto m = build_model<float>(variant_spec("S0"), ModelMode::inference, {1});
  Rng rng(1);
  const auto y = forward(m, random_tensor<float>({1, 3, 224, 224}, rng));
  EXPECT_EQ(y.shape(), (Shape4{1, 1000, 1, 1}));
}

TEST(BuildModel, ReparameterizedTrainMatchesInferenceStructure) {
  for (const auto& v : variant_names()) {
    const auto spec = variant_spec(v);
    const auto folded = reparameterize_model(build_model<float>(spec, ModelMode::train));
    const auto direct = build_model<float>(spec, ModelMode::inference);
    EXPECT_EQ(describe_model(folded), describe_model(direct)) << v;
    EXPECT_EQ(count_params(folded), count_params(direct)) << v;
  }
}

TEST(CountParams, SingleDepthwiseConv) {
  ConvSpec<float> c;
  c.weight = Tensor4<float>({8, 1, 3, 3});
  c.bias.assign(8, 0.f);
  c.groups = 8;
  EXPECT_EQ(c.param_count(), 80u);
  InferenceBlock<float> b;
  b.stages.push_back({c, std::nullopt});
  b.kind = BlockKind::dense;
  EXPECT_EQ(b.param_count(), 80u);
}

TEST(CountParams, MatchesTensorEnumeration) {
  for (const auto& v : variant_names()) {
    for (auto mode : {ModelMode::train, ModelMode::inference}) {
      const auto m = build_model<float>(variant_spec(v), mode);
      std::size_t enumerated = 0;
      visit_tensors(m, [&](const std::string&, auto values, const auto&, TensorRole) { enumerated += values.size(); });
      EXPECT_EQ(count_params(m), enumerated) << v;
    }
  }
}

TEST(CountParams, MatchesAnalyticOracle) {
  for (const auto& v : variant_names()) {
    const auto spec = variant_spec(v);
    const auto m = build_model<float>(spec, ModelMode::inference);
    const auto want = oracle::count_arch(spec, 224);
    EXPECT_EQ(count_params(m), want.params) << v;
    EXPECT_EQ(count_flops(m, 224), want.macs) << v;
  }
}

TEST(CountParams, FrozenValues) {
  // Recorded inference counts at 224; guards against silent architecture drift.
  const struct {
    const char* name;
    std::size_t params, macs;
  } rows[] = {{"S0", 2078504, 275160576},   {"S1", 4764840, 825119744},   {"S2", 7808168, 1298526848},
              {"S3", 10078312, 1895890944}, {"S4", 14838352, 2981270528}, {"mu0", 558760, 68924416},
              {"mu1", 969704, 139051072},   {"mu2", 1262632, 214111232}};
  for (const auto& r : rows) {
    const auto m = build_model<float>(variant_spec(r.name), ModelMode::inference);
    EXPECT_EQ(count_params(m), r.params) << r.name;
    EXPECT_EQ(count_flops(m, 224), r.macs) << r.name;
  }
}

TEST(CountFlops, SinglePointwiseMac) {
  Model<float> m;
  m.in_channels = 1;
  InferenceBlock<float> b;
  b.kind = BlockKind::dense;
  ConvSpec<float> c;
  c.weight = Tensor4<float>({1, 1, 1, 1}, 1.f);
  c.bias = {0.f};
  b.stages.push_back({c, std::nullopt});
  m.layers.emplace_back(b);
  m.layers.emplace_back(AvgPool{});
  m.layers.emplace_back(Linear<float>{1, 1, {1.f}, {0.f}});
  m.validate();
  // conv 1 + pool 1 + linear 1.
  EXPECT_EQ(count_flops(m, 1), 3u);
  ConvGeometry g = ConvGeometry::make({1, 1, 1, 1}, 1, 1, 1, 0, 1);
  EXPECT_EQ(g.macs(), 1u);
}

TEST(CountFlops, PublishedValuesWithinTolerance) {
  EXPECT_NEAR(static_cast<double>(count_flops(build_model<float>(variant_spec("S1"), ModelMode::inference), 224)),
              825e6, 0.03 * 825e6);
  EXPECT_NEAR(static_cast<double>(count_flops(build_model<float>(variant_spec("mu0"), ModelMode::inference), 224)),
              68e6, 0.03 * 68e6);
}

TEST(CountFlops, TrainModeRejected) {
  const auto m = build_model<float>(variant_spec("mu0"), ModelMode::train);
  EXPECT_THROW(count_flops(m, 224), ConfigError);
}

TEST(Counts, MonotoneInAlpha) {
  const auto base = variant_spec("S0");
  for (std::size_t stage = 0; stage < 6; ++stage) {
    auto wider = base;
    wider.stages[stage].alpha += 0.5;
    const auto a = build_model<float>(base, ModelMode::inference);
    const auto b = build_model<float>(wider, ModelMode::inference);
    EXPECT_LE(count_params(a), count_params(b)) << stage;
    EXPECT_LE(count_flops(a, 224), count_flops(b, 224)) << stage;
  }
}
