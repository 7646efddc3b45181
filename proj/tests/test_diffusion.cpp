#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tgsn/analysis.hpp"
#include "tgsn/diffusion.hpp"

using namespace tgsn;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::InvalidConfig;
}

struct MeanVar {
  double mean = 0, var = 0;
};

MeanVar mean_var(const std::vector<double>& v) {
  MeanVar r;
  for (double x : v) r.mean += x / static_cast<double>(v.size());
  for (double x : v) r.var += (x - r.mean) * (x - r.mean) / static_cast<double>(v.size() - 1);
  return r;
}

// Two well-separated Gaussian clouds in 6 dimensions.
std::vector<std::vector<float>> cloud(double centre, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<float>> rows(n, std::vector<float>(6));
  for (auto& r : rows)
    for (std::size_t i = 0; i < 6; ++i)
      r[i] = static_cast<float>(centre * (i % 2 ? -1.0 : 1.0) + 0.6 * standard_normal(rng));
  return rows;
}

Matrix as_matrix(const std::vector<std::vector<float>>& rows) {
  Matrix m;
  for (const auto& r : rows) m.emplace_back(r.begin(), r.end());
  return m;
}

PtdaConfig toy_ptda() {
  PtdaConfig c;
  c.hidden = 32;
  c.pretrain_iterations = 800;
  c.finetune_iterations = 400;
  c.batch_size = 32;
  return c;
}

FeatureTensor toy_tensor(const std::vector<float>& v, int cls, double mmse, const std::string& id) {
  FeatureTensor t;
  t.num_features = 6;
  t.num_channels = 1;
  t.num_epochs = 1;
  t.values = v;
  t.feature_names = {"a", "b", "c", "d", "e", "f"};
  t.channel_names = {"Cz"};
  t.subject_id = id;
  t.class_label = cls;
  t.mmse = mmse;
  return t;
}

}  // namespace

TEST(Schedule, LinearScheduleInvariants) {
  for (std::size_t D : {50u, 200u, 1000u}) {
    auto s = linear_schedule(D);
    for (std::size_t i = 0; i < D; ++i) {
      EXPECT_GT(s.beta[i], 0.0);
      EXPECT_LT(s.beta[i], 1.0);
      EXPECT_GT(s.alpha_bar[i], 0.0);
      EXPECT_LT(s.alpha_bar[i], 1.0);
      if (i) {
        EXPECT_GE(s.beta[i], s.beta[i - 1]);
        EXPECT_LT(s.alpha_bar[i], s.alpha_bar[i - 1]);
      }
    }
  }
  auto full = linear_schedule(1000);
  EXPECT_DOUBLE_EQ(full.beta.front(), 1e-4);
  EXPECT_NEAR(full.beta.back(), 0.02, 1e-15);
  auto desk = linear_schedule(50);
  EXPECT_NEAR(desk.beta.front(), 2e-3, 1e-15);
  EXPECT_NEAR(desk.beta.back(), 0.4, 1e-15);
  EXPECT_LT(desk.alpha_bar.back(), 1e-3);
  EXPECT_EQ(code_of([] { linear_schedule(20); }), ErrorCode::InvalidConfig);
}

TEST(Schedule, QSampleLimitsAndRange) {
  auto s = linear_schedule(1000, 1e-4, 0.02, false);
  Rng rng(1);
  std::vector<double> x0(100), noise(100);
  for (auto& v : x0) v = standard_normal(rng);
  for (auto& v : noise) v = standard_normal(rng);
  auto x1 = q_sample<double>(s, x0, 1, noise);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(x1[i], x0[i], 0.05);
  EXPECT_EQ(code_of([&] { q_sample<double>(s, x0, 0, noise); }), ErrorCode::StepOutOfRange);
  EXPECT_EQ(code_of([&] { q_sample<double>(s, x0, 1001, noise); }), ErrorCode::StepOutOfRange);
}

TEST(Schedule, VariancePreservedForUnitData) {
  auto s = linear_schedule(50);
  Rng rng(2);
  const std::size_t n = 10000;
  std::vector<double> x0(n), noise(n);
  for (auto& v : x0) v = standard_normal(rng);
  for (std::size_t d : {1u, 10u, 25u, 50u}) {
    for (auto& v : noise) v = standard_normal(rng);
    auto mv = mean_var(q_sample<double>(s, x0, d, noise));
    EXPECT_NEAR(mv.var, 1.0, 3 * std::sqrt(2.0 / n)) << d;
  }
}

TEST(Schedule, StepwiseChainMatchesClosedForm) {
  auto s = linear_schedule(50);
  const std::size_t n = 10000;
  Rng rng(3);
  std::vector<double> x(n, 2.0), noise(n);
  for (std::size_t d = 1; d <= 50; ++d) {
    for (auto& v : noise) v = standard_normal(rng);
    x = q_step<double>(s, x, d, noise);
    if (d % 10) continue;
    for (auto& v : noise) v = standard_normal(rng);
    auto closed = mean_var(q_sample<double>(s, std::vector<double>(n, 2.0), d, noise));
    auto chain = mean_var(x);
    const double se_mean = std::sqrt((closed.var + chain.var) / n);
    const double se_var = std::sqrt(2.0 / n) * std::sqrt(closed.var * closed.var + chain.var * chain.var);
    EXPECT_NEAR(chain.mean, closed.mean, 3 * se_mean) << d;
    EXPECT_NEAR(chain.var, closed.var, 3 * se_var) << d;
    EXPECT_NEAR(closed.mean, 2.0 * std::sqrt(s.alpha_bar_at(d)), 3 * std::sqrt(closed.var / n));
  }
}

TEST(Sampling, NullDenoiserMatchesAnalyticChain) {
  auto s = linear_schedule(50);
  const std::size_t n = 20000;
  auto null = [](const ad::Tensor<double>& x, const std::vector<std::size_t>&) {
    return ad::Tensor<double>::zeros(x.shape());
  };
  auto out = p_sample_loop_with<double>(null, s, 1, n, 7);
  double var = 1.0;
  for (std::size_t d = 50; d >= 1; --d) {
    var /= 1.0 - s.beta_at(d);
    if (d > 1) var += s.beta_at(d);
  }
  std::vector<double> v;
  for (const auto& r : out) {
    ASSERT_TRUE(std::isfinite(r[0]));
    v.push_back(r[0]);
  }
  auto mv = mean_var(v);
  EXPECT_NEAR(mv.mean, 0.0, 3 * std::sqrt(var / n));
  EXPECT_NEAR(mv.var, var, 3 * var * std::sqrt(2.0 / n));
  EXPECT_TRUE(p_sample_loop_with<double>(null, s, 1, 0, 7).empty());
}

TEST(Sampling, BlowUpIsReported) {
  auto s = linear_schedule(50);
  auto wild = [](const ad::Tensor<double>& x, const std::vector<std::size_t>&) {
    return ad::Tensor<double>::full(x.shape(), -1e306);
  };
  EXPECT_EQ(code_of([&] { p_sample_loop_with<double>(wild, s, 2, 3, 1); }), ErrorCode::SamplingDiverged);
}

TEST(Denoiser, SkipGainInitialization) {
  auto s = linear_schedule(50);
  Denoiser<float> with(DenoiserConfig{6, 8, 50, 1}, &s);
  Denoiser<float> without(DenoiserConfig{6, 8, 50, 1});
  auto g = with.params().get("den.skip");
  for (std::size_t d = 0; d < 50; ++d) {
    EXPECT_NEAR(g[d], std::sqrt(1.0 - s.alpha_bar[d]), 1e-6);
    EXPECT_EQ(without.params().get("den.skip")[d], 0.0f);
  }
  auto wrong = linear_schedule(100);
  EXPECT_EQ(code_of([&] { Denoiser<float>(DenoiserConfig{6, 8, 50, 1}, &wrong); }), ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([&] { with.forward(ad::Tensor<float>::zeros({1, 6}), {51}); }), ErrorCode::StepOutOfRange);
}

TEST(Denoiser, ZeroIterationsAndDeterminism) {
  auto s = linear_schedule(50);
  auto data = cloud(1.0, 30, 1);
  Denoiser<float> a(DenoiserConfig{6, 16, 50, 3}, &s);
  const auto before = a.params().snapshot().params;
  EXPECT_TRUE(train_denoiser(a, s, data, DenoiserTrainConfig{0, 8, 1e-3, 1}).losses.empty());
  EXPECT_EQ(a.params().snapshot().params, before);
  Denoiser<float> b(DenoiserConfig{6, 16, 50, 3}, &s);
  train_denoiser(a, s, data, DenoiserTrainConfig{50, 8, 1e-3, 9});
  train_denoiser(b, s, data, DenoiserTrainConfig{50, 8, 1e-3, 9});
  EXPECT_EQ(a.params().snapshot().params, b.params().snapshot().params);
  EXPECT_EQ(p_sample_loop(a, s, 5, 4), p_sample_loop(b, s, 5, 4));
  std::vector<std::vector<float>> bad{{1.0f, 2.0f}};
  EXPECT_EQ(code_of([&] { train_denoiser(a, s, bad, DenoiserTrainConfig{1, 1, 1e-3, 1}); }),
            ErrorCode::ShapeMismatch);
}

TEST(Denoiser, LossCurveDecreases) {
  auto s = linear_schedule(50);
  std::vector<double> drops;
  std::vector<int> monotone;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    std::vector<std::vector<float>> data(200, std::vector<float>(1));
    for (auto& r : data) r[0] = static_cast<float>(2.0 + 0.5 * standard_normal(rng));
    auto held = data;
    for (auto& r : held) r[0] = static_cast<float>(2.0 + 0.5 * standard_normal(rng));
    Denoiser<float> net(DenoiserConfig{1, 32, 50, seed}, &s);
    const double before = denoiser_loss(net, s, held, 20, 5);
    auto log = train_denoiser(net, s, data, DenoiserTrainConfig{200, 128, 1e-3, seed});
    const double after = denoiser_loss(net, s, held, 20, 5);
    drops.push_back(before - after);
    std::vector<double> windows;
    for (std::size_t w = 0; w < 4; ++w) {
      double m = 0;
      for (std::size_t i = 0; i < 50; ++i) m += log.losses[w * 50 + i] / 50;
      windows.push_back(m);
    }
    monotone.push_back(std::is_sorted(windows.rbegin(), windows.rend()) ? 1 : 0);
  }
  std::sort(drops.begin(), drops.end());
  std::sort(monotone.begin(), monotone.end());
  EXPECT_GT(drops[2], 0.0);
  EXPECT_EQ(monotone[2], 1);
}

TEST(Denoiser, DivergenceIsReported) {
  auto s = linear_schedule(50);
  auto data = cloud(1.0, 30, 2);
  Denoiser<float> net(DenoiserConfig{6, 16, 50, 3}, &s);
  EXPECT_EQ(code_of([&] { train_denoiser(net, s, data, DenoiserTrainConfig{400, 8, 1e4, 1}); }),
            ErrorCode::Diverged);
}

TEST(Denoiser, CheckpointRoundTrip) {
  auto s = linear_schedule(50);
  Denoiser<float> net(DenoiserConfig{6, 16, 50, 3}, &s);
  train_denoiser(net, s, cloud(1.0, 20, 3), DenoiserTrainConfig{20, 8, 1e-3, 1});
  std::stringstream ss;
  write_checkpoint(ss, denoiser_checkpoint(net));
  auto back = denoiser_from_checkpoint(read_checkpoint(ss));
  EXPECT_EQ(back.params().snapshot().params, net.params().snapshot().params);
  EXPECT_EQ(p_sample_loop(back, s, 3, 2), p_sample_loop(net, s, 3, 2));
}

TEST(Ptda, PerClassSamplesResembleTheirClass) {
  auto cfg = toy_ptda();
  auto s = cfg.schedule();
  const double centre[2] = {1.0, -1.0};
  std::vector<std::vector<std::vector<float>>> held(2), gen(2);
  for (int k = 0; k < 2; ++k) {
    auto net = pretrain_denoiser(cloud(centre[k], 60, 10 + k), cfg, 5 + k);
    gen[k] = p_sample_loop(net, s, 60, 3);
    held[k] = cloud(centre[k], 60, 20 + k);
  }
  for (int k = 0; k < 2; ++k) {
    const double same = mmd(as_matrix(gen[k]), as_matrix(held[k]), MmdConfig{1.0}).value;
    const double other = mmd(as_matrix(gen[k]), as_matrix(held[1 - k]), MmdConfig{1.0}).value;
    EXPECT_LT(same, other) << k;
  }
}

TEST(Ptda, FineTuningMovesTowardTarget) {
  auto cfg = toy_ptda();
  cfg.pretrain_iterations = 600;
  auto s = cfg.schedule();
  std::vector<double> gap;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto target = cloud(1.0, 40, 100 + seed);
    auto mixture = cloud(1.0, 60, 200 + seed);
    auto other = cloud(-1.0, 60, 300 + seed);
    mixture.insert(mixture.end(), other.begin(), other.end());
    auto base = pretrain_denoiser(mixture, cfg, seed);
    auto tuned = finetune_denoiser(base, target, cfg, seed);
    auto held = as_matrix(cloud(1.0, 60, 400 + seed));
    const double before = mmd(as_matrix(p_sample_loop(base, s, 60, seed)), held, MmdConfig{1.0}).value;
    const double after = mmd(as_matrix(p_sample_loop(tuned, s, 60, seed)), held, MmdConfig{1.0}).value;
    gap.push_back(before - after);
  }
  std::sort(gap.begin(), gap.end());
  EXPECT_GE(gap[2], 0.0);
}

TEST(Ptda, ZeroFineTuneStepsKeepsPretrainedParams) {
  auto cfg = toy_ptda();
  cfg.pretrain_iterations = 30;
  cfg.finetune_iterations = 0;
  auto base = pretrain_denoiser(cloud(1.0, 20, 1), cfg, 2);
  auto tuned = finetune_denoiser(base, cloud(-1.0, 20, 2), cfg, 2);
  EXPECT_EQ(base.params().snapshot().params, tuned.params().snapshot().params);
  std::vector<std::vector<float>> wrong{{1.0f}};
  EXPECT_EQ(code_of([&] { finetune_denoiser(base, wrong, cfg, 2); }), ErrorCode::ShapeMismatch);
}

TEST(Ptda, AugmentArithmeticAndProvenance) {
  auto cfg = toy_ptda();
  cfg.pretrain_iterations = 20;
  std::vector<FeatureTensor> real;
  auto a = cloud(1.0, 10, 1), b = cloud(-1.0, 10, 2);
  for (std::size_t i = 0; i < 10; ++i) {
    real.push_back(toy_tensor(a[i], 0, 10.0 + static_cast<double>(i), "A" + std::to_string(i)));
    real.push_back(toy_tensor(b[i], 1, 25.0, "B" + std::to_string(i)));
  }
  auto da = pretrain_denoiser(a, cfg, 1), db = pretrain_denoiser(b, cfg, 2);
  std::map<int, const Denoiser<float>*> dens{{0, &da}, {1, &db}};
  EXPECT_EQ(augment_dataset(real, dens, cfg, 0.0, 1).size(), 20u);
  auto mixed = augment_dataset(real, dens, cfg, 1.0, 1);
  ASSERT_EQ(mixed.size(), 40u);
  int generated[2] = {0, 0};
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    const auto& t = mixed[i];
    EXPECT_EQ(t.origin == Origin::Generated, i >= 20);
    if (t.origin != Origin::Generated) continue;
    ++generated[t.class_label];
    if (t.class_label == 0) {
      EXPECT_GE(t.mmse, 10.0);
      EXPECT_LE(t.mmse, 19.0);
    } else {
      EXPECT_EQ(t.mmse, 25.0);
    }
  }
  EXPECT_EQ(generated[0], 10);
  EXPECT_EQ(generated[1], 10);
  EXPECT_EQ(augment_dataset(real, dens, cfg, 0.5, 1).size(), 30u);
  std::map<int, const Denoiser<float>*> partial{{0, &da}};
  EXPECT_EQ(code_of([&] { augment_dataset(real, partial, cfg, 1.0, 1); }), ErrorCode::MissingClassParams);
}
