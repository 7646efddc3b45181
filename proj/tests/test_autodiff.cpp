#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support/grad_cases.hpp"
#include "support/gradcheck.hpp"
#include "tgsn/autodiff.hpp"
#include "tgsn/params.hpp"

using namespace tgsn;
using tgsn::testing::TensorD;

TEST(AutodiffGradients, EveryOpMatchesFiniteDifferences) {
  for (const auto& c : tgsn::testing::grad_cases()) {
    auto rep = c.run();
    EXPECT_LT(rep.worst, tgsn::testing::kGradRelTol) << c.name << " worst at " << rep.where;
  }
}

namespace {

using TensorF = ad::Tensor<float>;

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

}  // namespace

TEST(Autodiff, SoftmaxOfZerosIsUniform) {
  auto y = ad::softmax(TensorD::zeros({1, 3}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  auto z = ad::softmax(TensorD::from({4, 5}, random_values(20, 1)));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < 5; ++i) s += z[r * 5 + i];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autodiff, IdentityKernelLeavesInputUnchanged) {
  auto x = TensorD::from({2, 3, 6, 5}, random_values(180, 2));
  std::vector<double> k(3 * 25, 0.0);
  for (std::size_t c = 0; c < 3; ++c) k[c * 25 + 12] = 1.0;
  auto w = TensorD::from({3, 5, 5}, k);
  auto y = ad::depthwise_dilated_conv2d(x, w);
  auto z = ad::depthwise_conv2d(x, w);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_DOUBLE_EQ(y[i], x[i]);
    EXPECT_DOUBLE_EQ(z[i], x[i]);
  }
}

TEST(Autodiff, DilatedKernelReach) {
  std::vector<double> xs(1 * 1 * 13 * 1, 0.0);
  xs[6] = 1.0;
  auto x = TensorD::from({1, 1, 13, 1}, xs);
  auto w = TensorD::full({1, 5, 5}, 1.0);
  auto y = ad::depthwise_dilated_conv2d(x, w);
  for (std::size_t h = 0; h < 13; ++h) {
    const bool reached = (h == 0 || h == 3 || h == 6 || h == 9 || h == 12);
    EXPECT_EQ(y[h] != 0.0, reached) << h;
  }
}

TEST(Autodiff, ShapeErrorNamesBothShapes) {
  try {
    ad::add(TensorD::zeros({2, 3}), TensorD::zeros({3, 2}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeError);
    const std::string m = e.what();
    EXPECT_NE(m.find("[2,3]"), std::string::npos) << m;
    EXPECT_NE(m.find("[3,2]"), std::string::npos) << m;
  }
  EXPECT_THROW(TensorD::from({2, 2}, {1, 2, 3}), Error);
}

TEST(Autodiff, BatchNormTrainModeNormalizes) {
  const std::size_t N = 64, C = 3;
  auto raw = random_values(N * C * 4 * 2, 4);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = 5.0 + 3.0 * raw[i];
  auto x = TensorF::from({N, C, 4, 2}, std::vector<float>(raw.begin(), raw.end()));
  ad::BatchNormBuffers<float> buf(C);
  auto y = ad::batchnorm2d(x, TensorF::full({C}, 1.0f), TensorF::full({C}, 0.0f), buf, true);
  for (std::size_t c = 0; c < C; ++c) {
    double m = 0, v = 0, cnt = 0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < 8; ++p, ++cnt) m += y[(n * C + c) * 8 + p];
    m /= cnt;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < 8; ++p) v += std::pow(y[(n * C + c) * 8 + p] - m, 2) / cnt;
    EXPECT_NEAR(m, 0.0, 1e-3);
    EXPECT_NEAR(v, 1.0, 1e-3);
    EXPECT_GT(buf.running_mean[c], 0.3f);
  }
}

TEST(Autodiff, DropPathModes) {
  auto x = TensorD::from({8, 2, 3}, random_values(48, 5));
  Rng rng(1);
  auto eval = ad::droppath(x, 0.5, false, &rng);
  EXPECT_EQ(eval.raw(), x.raw());
  auto all = ad::droppath(x, 1.0, true, &rng);
  for (double v : all.data()) EXPECT_EQ(v, 0.0);
  auto half = ad::droppath(x, 0.5, true, &rng);
  for (std::size_t n = 0; n < 8; ++n) {
    const bool kept = half[n * 6] != 0.0;
    for (std::size_t i = 0; i < 6; ++i)
      EXPECT_DOUBLE_EQ(half[n * 6 + i], kept ? 2.0 * x[n * 6 + i] : 0.0);
  }
}

TEST(Autodiff, AttentionWeightsAreDistributions) {
  auto q = TensorD::from({2, 1, 8}, random_values(16, 6));
  auto k = TensorD::from({2, 7, 8}, random_values(112, 7));
  std::vector<double> w;
  ad::scaled_dot_product_attention(q, k, k, 4, &w);
  ASSERT_EQ(w.size(), 2u * 4 * 7);
  for (std::size_t r = 0; r < 8; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_GE(w[r * 7 + j], 0.0);
      s += w[r * 7 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(ErrorCode::ShapeError, [&] {
    try {
      ad::scaled_dot_product_attention(q, k, k, 3);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::InvalidConfig;
  }());
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  std::vector<double> w{1.0, -2.0, 3.0}, g(3, 0.0);
  AdamMoments<double> st;
  for (long t = 1; t <= 10; ++t) adam_update<double>(w, g, st, t, AdamConfig{0.1});
  EXPECT_EQ(w, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Adam, QuadraticDescendsMonotonically) {
  // Scalar simulation of the bias-corrected update on f(w) = w^2.
  double m = 0, v = 0, ref = 1.0;
  std::vector<double> w{1.0};
  AdamMoments<double> st;
  double prev = 1.0;
  for (long t = 1; t <= 100; ++t) {
    std::vector<double> g{2.0 * w[0]};
    const double gr = 2.0 * ref;
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    ref -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    adam_update<double>(w, g, st, t, AdamConfig{0.1});
    EXPECT_NEAR(w[0], ref, 1e-12);
    if (t <= 10) {
      EXPECT_LT(w[0], prev);
    }
    prev = w[0];
  }
  EXPECT_LT(std::abs(w[0]), 0.1);
}

TEST(Adam, NonFiniteGradientRejectedBeforeUpdate) {
  ParamSet<double> ps;
  auto a = ps.add("a", {2}, {1.0, 2.0});
  auto y = ad::sum_all(ad::mul(a, TensorD::from({2}, {std::numeric_limits<double>::infinity(), 1.0})));
  ad::backward(y);
  Adam<double> opt(AdamConfig{0.1});
  EXPECT_THROW(opt.step(ps), Error);
  EXPECT_EQ(a.values(), (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(opt.steps(), 0);
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    ParamSet<double> ps;
    Rng rng(3);
    auto w = ps.add_normal("w", {4}, rng);
    Adam<double> opt(AdamConfig{0.05});
    for (int i = 0; i < 20; ++i) {
      ps.zero_grad();
      ad::backward(ad::sum_all(ad::mul(w, w)));
      opt.step(ps);
    }
    return w.values();
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripRestoresParamsAndBuffers) {
  ParamSet<float> a, b;
  Rng r1(1), r2(2);
  a.add_normal("x.w", {3, 2}, r1);
  a.add_buffers("bn", 2)->running_mean = {0.5f, -0.5f};
  b.add_normal("x.w", {3, 2}, r2);
  b.add_buffers("bn", 2);
  Checkpoint ck;
  ck.meta["k"] = 1;
  append_params(ck, a);
  std::stringstream ss;
  write_checkpoint(ss, ck);
  auto back = read_checkpoint(ss);
  EXPECT_EQ(back.meta["k"], 1);
  load_params(back, b);
  EXPECT_EQ(b.get("x.w").values(), a.get("x.w").values());
  EXPECT_EQ(b.buffers().at("bn").running_mean, (std::vector<float>{0.5f, -0.5f}));
  ParamSet<float> c;
  c.add_constant("x.w", {2, 3}, 0.0f);
  EXPECT_THROW(load_params(back, c), Error);
  std::istringstream bad("TGSN-CKPT v2\n");
  EXPECT_THROW(read_checkpoint(bad), Error);
}
