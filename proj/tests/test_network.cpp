#include <gtest/gtest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "tgsn/model.hpp"

using namespace tgsn;
using tgsn::testing::random_tensor;
using tgsn::testing::TensorD;

namespace {

GsaConfig small_gsa(std::size_t width = 8) {
  GsaConfig g;
  g.width = width;
  g.blocks = 1;
  g.ffn_expansion = 2;
  return g;
}

void fill(TensorD t, double v) {
  for (auto& x : t.values()) x = v;
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Gsa, GstaUnitPreservesShape) {
  ParamSet<double> ps;
  Rng rng(1);
  GsaBlock<double> b(ps, "b.", small_gsa(), rng);
  auto x = random_tensor({2, 8, 6, 5}, rng, 1.0, false);
  EXPECT_EQ(b.gsta_unit(x).shape(), x.shape());
  EXPECT_EQ(b.conv_ffn(x).shape(), x.shape());
  EXPECT_EQ(b.gate_w.dim(0), 16u);
}

TEST(Gsa, ClosedGateHalvesValueBranch) {
  ParamSet<double> ps;
  Rng rng(2);
  GsaBlock<double> b(ps, "b.", small_gsa(), rng);
  auto gw = b.gate_w;
  for (std::size_t i = 8 * 8; i < 16 * 8; ++i) gw.values()[i] = 0.0;
  auto gb = b.gate_b;
  for (auto& v : gb.values()) v = 0.3;
  for (std::size_t i = 8; i < 16; ++i) gb.values()[i] = 0.0;
  auto x = random_tensor({2, 8, 6, 5}, rng, 1.0, false);
  auto local = ad::depthwise_conv2d(ad::gelu(ad::conv2d_1x1(x, b.proj_w, b.proj_b)), b.dw_w, b.dw_b);
  auto context = ad::depthwise_dilated_conv2d(local, b.dwd_w, b.dwd_b, 3);
  auto g1 = ad::split_channels(ad::conv2d_1x1(context, b.gate_w, b.gate_b)).first;
  auto y = b.gsta_unit(x);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], 0.5 * g1[i], 1e-12);
}

TEST(Gsa, GstaReceptiveField) {
  ParamSet<double> ps;
  Rng rng(3);
  GsaBlock<double> b(ps, "b.", small_gsa(4), rng);
  const std::size_t S = 21, mid = 10, reach = 2 + 3 * 2;
  auto x = random_tensor({1, 4, S, S}, rng, 1.0, false);
  auto base = b.gsta_unit(x);
  auto xp = TensorD::from(x.shape(), x.values());
  for (std::size_t c = 0; c < 4; ++c) xp.values()[(c * S + mid) * S + mid] += 1.0;
  auto moved = b.gsta_unit(xp);
  std::size_t at_edge = 0;
  for (std::size_t e = 0; e < 4; ++e)
    for (std::size_t h = 0; h < S; ++h)
      for (std::size_t w = 0; w < S; ++w) {
        const std::size_t i = (e * S + h) * S + w;
        const auto dist = std::max(h > mid ? h - mid : mid - h, w > mid ? w - mid : mid - w);
        const bool changed = moved[i] != base[i];
        if (dist > reach) {
          EXPECT_FALSE(changed) << h << "," << w;
        }
        if (dist == reach && changed) ++at_edge;
      }
  EXPECT_GT(at_edge, 0u);
}

TEST(Gsa, ZeroScalesGiveIdentityInEval) {
  ParamSet<double> ps;
  Rng rng(4);
  GsaBlock<double> b(ps, "b.", small_gsa(), rng);
  fill(b.lambda1, 0.0);
  fill(b.lambda2, 0.0);
  auto x = random_tensor({3, 8, 4, 3}, rng, 1.0, false);
  auto y = b.forward(x, {});
  EXPECT_EQ(max_abs_diff(x, y), 0.0);
}

TEST(Gsa, FullDropPathGivesIdentityInTrain) {
  ParamSet<double> ps;
  Rng rng(5);
  auto cfg = small_gsa();
  cfg.droppath_rate = 1.0;
  cfg.lambda_init = 0.7;
  GsaBlock<double> b(ps, "b.", cfg, rng);
  auto x = random_tensor({3, 8, 4, 3}, rng, 1.0, false);
  Rng stream(9);
  auto y = b.forward(x, ForwardMode{true, &stream});
  EXPECT_EQ(max_abs_diff(x, y), 0.0);
}

TEST(Gsa, ZeroFfnWeightsGiveZeroOutput) {
  ParamSet<double> ps;
  Rng rng(6);
  GsaBlock<double> b(ps, "b.", small_gsa(), rng);
  for (auto t : {b.ffn1_w, b.ffn1_b, b.ffn_dw_w, b.ffn_dw_b, b.ffn2_w, b.ffn2_b}) fill(t, 0.0);
  auto y = b.conv_ffn(random_tensor({2, 8, 4, 3}, rng, 1.0, false));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Gsa, LambdaGradientMatchesFiniteDifferences) {
  ParamSet<double> ps;
  Rng rng(7);
  auto cfg = small_gsa(4);
  cfg.lambda_init = 0.4;
  GsaBlock<double> b(ps, "b.", cfg, rng);
  auto x = random_tensor({2, 4, 4, 3}, rng, 1.0, false);
  tgsn::testing::Projector p(8);
  auto rep = tgsn::testing::grad_check([&] { return p(b.forward(x, {})); },
                                       {b.lambda1, b.lambda2}, {"lambda1", "lambda2"});
  EXPECT_LT(rep.worst, tgsn::testing::kGradRelTol) << rep.where;
}

TEST(Gsa, StackTokenCountAndDeterminism) {
  GsaConfig g;
  g.width = 8;
  ParamSet<float> ps;
  Rng rng(8);
  GsaStack<float> st(ps, 25, g, rng);
  EXPECT_EQ(st.blocks.size(), 3u);
  EXPECT_TRUE(ps.contains("gsa.k2.gsta.dwd.weight"));
  std::vector<float> xv(2 * 25 * 19 * 5);
  for (auto& v : xv) v = static_cast<float>(standard_normal(rng));
  auto x = ad::Tensor<float>::from({2, 25, 19, 5}, xv);
  auto a = st.tokens(x, {});
  auto b = st.tokens(x, {});
  EXPECT_EQ(a.shape(), (ad::Shape{2, 95, 8}));
  EXPECT_EQ(a.values(), b.values());
}

TEST(Gsa, RejectsBadConfig) {
  auto g = small_gsa();
  g.dilation = 2;
  EXPECT_THROW(validate(g), Error);
  g = small_gsa();
  g.dw_kernel = 4;
  EXPECT_THROW(validate(g), Error);
}

TEST(Tgq, IdenticalTokensReturnTheValue) {
  std::vector<double> v{0.3, -1.2, 0.5, 2.0};
  std::vector<double> kv;
  for (int i = 0; i < 6; ++i) kv.insert(kv.end(), v.begin(), v.end());
  auto k = TensorD::from({1, 6, 4}, kv);
  Rng rng(1);
  auto q = random_tensor({1, 1, 4}, rng, 1.0, false);
  std::vector<double> w;
  auto out = ad::scaled_dot_product_attention(q, k, k, 1, &w);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out[i], v[i], 1e-12);
  for (double a : w) EXPECT_NEAR(a, 1.0 / 6.0, 1e-12);
}

TEST(Tgq, TwoTokenAttentionMatchesScalarOracle) {
  auto q = TensorD::from({1, 1, 2}, {0.8, -0.4});
  auto k = TensorD::from({1, 2, 2}, {1.0, 0.5, -0.3, 2.0});
  auto v = TensorD::from({1, 2, 2}, {3.0, -1.0, 0.5, 4.0});
  const double s0 = (0.8 * 1.0 - 0.4 * 0.5) / std::sqrt(2.0);
  const double s1 = (0.8 * -0.3 - 0.4 * 2.0) / std::sqrt(2.0);
  const double a0 = std::exp(s0) / (std::exp(s0) + std::exp(s1)), a1 = 1 - a0;
  auto out = ad::scaled_dot_product_attention(q, k, v, 1);
  EXPECT_NEAR(out[0], a0 * 3.0 + a1 * 0.5, 1e-3);
  EXPECT_NEAR(out[1], a0 * -1.0 + a1 * 4.0, 1e-3);
}

TEST(Tgq, UniformTokensGiveUniformChannelAttention) {
  ParamSet<double> ps;
  Rng rng(1);
  TgqConfig c;
  c.width = 8;
  TgqModule<double> t(ps, c, rng);
  std::vector<double> tok;
  for (std::size_t i = 0; i < 2 * 30; ++i)
    for (std::size_t e = 0; e < 8; ++e) tok.push_back(0.1 * static_cast<double>(e) - 0.3);
  auto out = t.forward(TensorD::from({2, 30, 8}, tok), {});
  for (std::size_t k = 0; k < 2; ++k) {
    ASSERT_EQ(out.attention[k].size(), 2u * 4 * 30);
    for (std::size_t n = 0; n < 2; ++n) {
      auto map = attention_map(out.attention[k], n, 4, 6, 5);
      double s = 0;
      for (double v : map) {
        EXPECT_NEAR(v, 1.0 / 6.0, 1e-12);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Tgq, AttentionRowsAreDistributions) {
  ModelConfig mc;
  mc.gsa.width = 8;
  TgsnModel<double> m(mc);
  Rng rng(2);
  auto out = m.forward(random_tensor({3, 25, 8, 5}, rng, 1.0, false), {});
  for (const auto& w : out.attention)
    for (std::size_t r = 0; r < 3 * 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 40; ++j) s += w[r * 40 + j];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Tgq, MmseQueryDoesNotTouchLogits) {
  ModelConfig mc;
  mc.gsa.width = 8;
  TgsnModel<double> m(mc);
  Rng rng(3);
  auto x = random_tensor({2, 25, 8, 5}, rng, 1.0, false);
  auto before = m.forward(x, {});
  fill(m.params().get("tgq.mmse.query"), 0.0);
  auto after = m.forward(x, {});
  EXPECT_EQ(before.logits.values(), after.logits.values());
  EXPECT_NE(before.mmse.values(), after.mmse.values());
}

TEST(Tgq, QueryInitAndHeadDivisibility) {
  ParamSet<double> ps;
  Rng rng(4);
  TgqConfig c;
  c.width = 256;
  TgqModule<double> t(ps, c, rng);
  double ss = 0;
  for (double v : t.head(Task::Dementia).query.data()) {
    EXPECT_LE(std::abs(v), 0.04);
    ss += v * v;
  }
  EXPECT_NEAR(std::sqrt(ss / 256), 0.02 * 0.88, 0.003);  // sd of N(0, 0.02) truncated at 2 sd
  c.width = 10;
  ParamSet<double> ps2;
  try {
    TgqModule<double> bad(ps2, c, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
  }
}

TEST(Model, ShapeChecksAndMmseInit) {
  ModelConfig mc;
  mc.gsa.width = 8;
  mc.mmse_init = 21.0;
  TgsnModel<float> m(mc);
  EXPECT_FLOAT_EQ(m.params().get("tgq.mmse.head.bias")[0], 21.0f);
  try {
    m.forward(ad::Tensor<float>::zeros({1, 25, 7, 5}), {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeError);
  }
  mc.use_gsa = false;
  mc.use_tgq = false;
  TgsnModel<float> plain(mc);
  auto out = plain.forward(ad::Tensor<float>::full({2, 25, 8, 5}, 0.1f), {});
  EXPECT_EQ(out.logits.shape(), (ad::Shape{2, 3}));
  EXPECT_TRUE(out.attention[0].empty());
}
