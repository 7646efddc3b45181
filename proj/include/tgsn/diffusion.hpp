#pragma once

// DDPM over flattened feature tensors: schedule, forward corruption, an MLP
// noise predictor, ancestral sampling, pretrain/fine-tune, and augmentation.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tgsn/autodiff.hpp"
#include "tgsn/features.hpp"
#include "tgsn/params.hpp"
#include "tgsn/rng.hpp"

namespace tgsn {

struct DiffusionSchedule {
  std::size_t steps = 0;          // D
  std::vector<double> beta;       // beta[d-1] for d = 1..D
  std::vector<double> alpha_bar;  // prod_{s<=d} (1 - beta_s)

  double beta_at(std::size_t d) const { return beta.at(d - 1); }
  double alpha_bar_at(std::size_t d) const { return alpha_bar.at(d - 1); }
};

// Linear schedule from beta_start to beta_end. With `scale_to_steps` the
// endpoints are multiplied by 1000/D so that short chains still end near
// pure noise.
inline DiffusionSchedule linear_schedule(std::size_t D, double beta_start = 1e-4,
                                         double beta_end = 0.02, bool scale_to_steps = true) {
  if (D == 0) fail(ErrorCode::InvalidConfig, "diffusion steps must be positive");
  const double s = scale_to_steps ? 1000.0 / static_cast<double>(D) : 1.0;
  const double b0 = beta_start * s, b1 = beta_end * s;
  if (!(b0 > 0 && b1 >= b0 && b1 < 1))
    fail(ErrorCode::InvalidConfig, "beta schedule must satisfy 0 < start <= end < 1");
  DiffusionSchedule sch;
  sch.steps = D;
  sch.beta.resize(D);
  sch.alpha_bar.resize(D);
  double prod = 1.0;
  for (std::size_t i = 0; i < D; ++i) {
    sch.beta[i] = D == 1 ? b0 : b0 + (b1 - b0) * static_cast<double>(i) / static_cast<double>(D - 1);
    prod *= 1.0 - sch.beta[i];
    sch.alpha_bar[i] = prod;
  }
  return sch;
}

// Closed-form marginal x_d = sqrt(abar_d) x0 + sqrt(1 - abar_d) noise.
template <class T>
std::vector<T> q_sample(const DiffusionSchedule& sch, std::span<const T> x0, std::size_t d,
                        std::span<const T> noise) {
  if (d < 1 || d > sch.steps)
    fail(ErrorCode::StepOutOfRange,
         "step " + std::to_string(d) + " outside [1," + std::to_string(sch.steps) + "]");
  if (noise.size() != x0.size()) fail(ErrorCode::ShapeError, "noise length differs from x0");
  const double a = std::sqrt(sch.alpha_bar_at(d)), b = std::sqrt(1.0 - sch.alpha_bar_at(d));
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (!std::isfinite(static_cast<double>(x0[i])))
      fail(ErrorCode::NonFiniteSample, "x0 contains a non-finite value");
    out[i] = static_cast<T>(a * x0[i] + b * noise[i]);
  }
  return out;
}

// One forward transition x_d = sqrt(1 - beta_d) x_{d-1} + sqrt(beta_d) noise.
template <class T>
std::vector<T> q_step(const DiffusionSchedule& sch, std::span<const T> prev, std::size_t d,
                      std::span<const T> noise) {
  if (d < 1 || d > sch.steps) fail(ErrorCode::StepOutOfRange, "step out of range");
  const double b = sch.beta_at(d), a = std::sqrt(1.0 - b), s = std::sqrt(b);
  std::vector<T> out(prev.size());
  for (std::size_t i = 0; i < prev.size(); ++i) out[i] = static_cast<T>(a * prev[i] + s * noise[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Noise predictor

struct DenoiserConfig {
  std::size_t dim = 0;  // F*C*T1
  std::size_t hidden = 128;
  std::size_t steps = 50;
  std::uint64_t seed = 0;
};

template <class T>
class Denoiser {
 public:
  using Tensor = ad::Tensor<T>;

  // With a schedule, the per-step skip gain starts at sqrt(1 - abar_d), the
  // noise predictor that is optimal for unit-variance Gaussian data.
  explicit Denoiser(const DenoiserConfig& cfg, const DiffusionSchedule* sch = nullptr)
      : cfg_(cfg) {
    if (cfg.dim == 0 || cfg.hidden == 0 || cfg.steps == 0)
      fail(ErrorCode::InvalidConfig, "denoiser dimensions must be positive");
    Rng rng(derive_seed(cfg.seed, {0x64656e6f6973ULL}));
    const auto H = cfg.hidden;
    w1_ = ps_.add_normal("den.fc1.weight", {cfg.dim, H}, rng, 1.0 / std::sqrt(double(cfg.dim)));
    b1_ = ps_.add_constant("den.fc1.bias", {H}, T(0));
    w2_ = ps_.add_normal("den.fc2.weight", {H, H}, rng, 1.0 / std::sqrt(double(H)));
    b2_ = ps_.add_constant("den.fc2.bias", {H}, T(0));
    w3_ = ps_.add_normal("den.fc3.weight", {H, cfg.dim}, rng, 1.0 / std::sqrt(double(H)));
    b3_ = ps_.add_constant("den.fc3.bias", {cfg.dim}, T(0));
    // Learned time-embedding table, initialized sinusoidally.
    std::vector<T> table(cfg.steps * H);
    for (std::size_t d = 0; d < cfg.steps; ++d)
      for (std::size_t h = 0; h < H; ++h) {
        const double freq = std::pow(1e-4, static_cast<double>(h / 2 * 2) / static_cast<double>(H));
        const double arg = static_cast<double>(d + 1) * freq;
        table[d * H + h] = static_cast<T>(h % 2 == 0 ? std::sin(arg) : std::cos(arg));
      }
    temb1_ = ps_.add("den.time_embedding", {cfg.steps, H}, std::move(table));
    if (sch && sch->steps != cfg.steps)
      fail(ErrorCode::InvalidConfig, "schedule and denoiser disagree on step count");
    std::vector<T> gain(cfg.steps, T(0));
    if (sch)
      for (std::size_t d = 0; d < cfg.steps; ++d)
        gain[d] = static_cast<T>(std::sqrt(1.0 - sch->alpha_bar[d]));
    skip_ = ps_.add("den.skip", {cfg.steps, 1}, std::move(gain));
  }

  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;
  Denoiser(Denoiser&&) = default;
  Denoiser& operator=(Denoiser&&) = default;

  Denoiser clone() const {
    Denoiser d(cfg_);
    d.ps_.restore(ps_.snapshot());
    return d;
  }

  // x [B, dim], steps 1-based per row. Returns predicted noise [B, dim].
  Tensor forward(const Tensor& x, const std::vector<std::size_t>& steps) const {
    if (x.rank() != 2 || x.dim(1) != cfg_.dim || x.dim(0) != steps.size())
      ad::shape_error("denoiser input", x.shape(), {steps.size(), cfg_.dim});
    std::vector<std::size_t> idx(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) {
      if (steps[i] < 1 || steps[i] > cfg_.steps)
        fail(ErrorCode::StepOutOfRange, "step " + std::to_string(steps[i]) + " out of range");
      idx[i] = steps[i] - 1;
    }
    auto h = ad::gelu(ad::add(ad::linear(x, w1_, b1_), ad::embedding(temb1_, idx)));
    h = ad::gelu(ad::linear(h, w2_, b2_));
    const std::size_t B = steps.size();
    auto gain = ad::reshape(ad::embedding(skip_, idx), {B});
    auto direct = ad::reshape(ad::scale_channels(ad::reshape(x, {1, B, cfg_.dim}), gain), {B, cfg_.dim});
    return ad::add(ad::linear(h, w3_, b3_), direct);
  }

  const DenoiserConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return ps_; }
  const ParamSet<T>& params() const { return ps_; }

 private:
  DenoiserConfig cfg_;
  ParamSet<T> ps_;
  Tensor w1_, b1_, w2_, b2_, w3_, b3_, temb1_, skip_;
};

struct DenoiserTrainConfig {
  std::size_t iterations = 1000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct DenoiserTrainLog {
  std::vector<double> losses;
};

// Noise-prediction training on rows of `data` (each row a flattened,
// z-scored feature tensor). Throws Diverged when the batch loss stays above
// ten times the first batch loss for 50 consecutive iterations.
template <class T>
DenoiserTrainLog train_denoiser(Denoiser<T>& net, const DiffusionSchedule& sch,
                                const std::vector<std::vector<T>>& data,
                                const DenoiserTrainConfig& cfg) {
  DenoiserTrainLog log;
  if (cfg.iterations == 0) return log;
  if (data.empty()) fail(ErrorCode::EmptySplit, "denoiser training set is empty");
  const std::size_t p = net.config().dim;
  for (const auto& row : data)
    if (row.size() != p)
      fail(ErrorCode::ShapeMismatch, "denoiser row has " + std::to_string(row.size()) +
                                         " values, expected " + std::to_string(p));
  if (sch.steps != net.config().steps)
    fail(ErrorCode::InvalidConfig, "schedule and denoiser disagree on step count");
  Rng rng(derive_seed(cfg.seed, {0x747261696eULL}));
  Adam<T> opt(AdamConfig{cfg.lr});
  const std::size_t B = std::max<std::size_t>(cfg.batch_size, 1);
  double first = 0;
  std::size_t above = 0;
  std::vector<T> xb(B * p), eps(B * p);
  std::vector<std::size_t> steps(B);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (std::size_t b = 0; b < B; ++b) {
      const auto& row = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
      steps[b] = std::uniform_int_distribution<std::size_t>(1, sch.steps)(rng);
      const double a = std::sqrt(sch.alpha_bar_at(steps[b]));
      const double s = std::sqrt(1.0 - sch.alpha_bar_at(steps[b]));
      for (std::size_t i = 0; i < p; ++i) {
        const T e = static_cast<T>(standard_normal(rng));
        eps[b * p + i] = e;
        xb[b * p + i] = static_cast<T>(a * row[i] + s * e);
      }
    }
    net.params().zero_grad();
    auto pred = net.forward(ad::Tensor<T>::from({B, p}, xb), steps);
    auto loss = ad::mse(pred, eps);
    const double l = loss.item();
    if (!std::isfinite(l)) fail(ErrorCode::Diverged, "denoiser loss is not finite");
    if (it == 0) first = l;
    above = l > 10.0 * first ? above + 1 : 0;
    if (above >= 50)
      fail(ErrorCode::Diverged, "denoiser loss above 10x initial for 50 iterations");
    log.losses.push_back(l);
    ad::backward(loss);
    opt.step(net.params());
  }
  return log;
}

// Mean noise-prediction loss on `data` with a fixed evaluation seed.
template <class T>
double denoiser_loss(const Denoiser<T>& net, const DiffusionSchedule& sch,
                     const std::vector<std::vector<T>>& data, std::size_t draws,
                     std::uint64_t seed) {
  ad::NoGradGuard ng;
  Rng rng(derive_seed(seed, {0x6576616cULL}));
  const std::size_t p = net.config().dim;
  double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < draws; ++r)
    for (const auto& row : data) {
      std::vector<T> xb(p), eps(p);
      std::vector<std::size_t> steps{std::uniform_int_distribution<std::size_t>(1, sch.steps)(rng)};
      const double a = std::sqrt(sch.alpha_bar_at(steps[0]));
      const double s = std::sqrt(1.0 - sch.alpha_bar_at(steps[0]));
      for (std::size_t i = 0; i < p; ++i) {
        eps[i] = static_cast<T>(standard_normal(rng));
        xb[i] = static_cast<T>(a * row[i] + s * eps[i]);
      }
      total += ad::mse(net.forward(ad::Tensor<T>::from({1, p}, xb), steps), eps).item();
      ++count;
    }
  return count ? total / static_cast<double>(count) : 0.0;
}

// Ancestral sampling with fixed variance sigma_d^2 = beta_d. `predict` maps
// (x [B, dim], steps) to predicted noise; any callable works so that tests can
// plug in analytic denoisers.
template <class T, class Predict>
std::vector<std::vector<T>> p_sample_loop_with(Predict&& predict, const DiffusionSchedule& sch,
                                               std::size_t dim, std::size_t n,
                                               std::uint64_t seed) {
  std::vector<std::vector<T>> out;
  if (n == 0) return out;
  ad::NoGradGuard ng;
  Rng rng(derive_seed(seed, {0x73616d706c65ULL}));
  std::vector<T> x(n * dim);
  for (auto& v : x) v = static_cast<T>(standard_normal(rng));
  for (std::size_t d = sch.steps; d >= 1; --d) {
    std::vector<std::size_t> steps(n, d);
    ad::Tensor<T> eps = predict(ad::Tensor<T>::from({n, dim}, x), steps);
    const double beta = sch.beta_at(d), abar = sch.alpha_bar_at(d);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(1.0 - beta);
    const double coef = beta / std::sqrt(1.0 - abar);
    const double sigma = std::sqrt(beta);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double v = inv_sqrt_alpha * (x[i] - coef * eps[i]);
      if (d > 1) v += sigma * standard_normal(rng);
      if (!std::isfinite(v))
        fail(ErrorCode::SamplingDiverged, "non-finite sample at step " + std::to_string(d));
      x[i] = static_cast<T>(v);
    }
  }
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(x.begin() + i * dim, x.begin() + (i + 1) * dim);
  return out;
}

template <class T>
std::vector<std::vector<T>> p_sample_loop(const Denoiser<T>& net, const DiffusionSchedule& sch,
                                          std::size_t n, std::uint64_t seed) {
  return p_sample_loop_with<T>(
      [&](const ad::Tensor<T>& x, const std::vector<std::size_t>& s) { return net.forward(x, s); },
      sch, net.config().dim, n, seed);
}

// ---------------------------------------------------------------------------
// Workflow

struct PtdaConfig {
  std::size_t steps = 50;  // D
  double beta_start = 1e-4;
  double beta_end = 0.02;
  bool scale_schedule = true;
  std::size_t hidden = 128;
  std::size_t batch_size = 32;
  std::size_t pretrain_iterations = 1500;
  std::size_t finetune_iterations = 300;
  double lr = 1e-3;  // fine-tuning uses lr / 10
  double ratio = 0.5;

  DiffusionSchedule schedule() const {
    return linear_schedule(steps, beta_start, beta_end, scale_schedule);
  }
};

inline nlohmann::json to_json(const PtdaConfig& c) {
  return {{"steps", c.steps},
          {"beta_start", c.beta_start},
          {"beta_end", c.beta_end},
          {"scale_schedule", c.scale_schedule},
          {"hidden", c.hidden},
          {"batch_size", c.batch_size},
          {"pretrain_iterations", c.pretrain_iterations},
          {"finetune_iterations", c.finetune_iterations},
          {"lr", c.lr},
          {"ratio", c.ratio}};
}

inline PtdaConfig ptda_config_from_json(const nlohmann::json& j, PtdaConfig c = {}) {
  c.steps = j.value("steps", c.steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.scale_schedule = j.value("scale_schedule", c.scale_schedule);
  c.hidden = j.value("hidden", c.hidden);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.pretrain_iterations = j.value("pretrain_iterations", c.pretrain_iterations);
  c.finetune_iterations = j.value("finetune_iterations", c.finetune_iterations);
  c.lr = j.value("lr", c.lr);
  c.ratio = j.value("ratio", c.ratio);
  if (c.ratio < 0) fail(ErrorCode::InvalidConfig, "augmentation ratio must be >= 0");
  return c;
}

inline std::vector<std::vector<float>> flatten_rows(std::span<const FeatureTensor* const> ts) {
  std::vector<std::vector<float>> rows;
  rows.reserve(ts.size());
  for (const auto* t : ts) rows.push_back(t->values);
  return rows;
}

inline Denoiser<float> pretrain_denoiser(const std::vector<std::vector<float>>& corpus,
                                         const PtdaConfig& cfg, std::uint64_t seed) {
  if (corpus.empty()) fail(ErrorCode::EmptySplit, "pretraining corpus is empty");
  const auto sch = cfg.schedule();
  Denoiser<float> net(DenoiserConfig{corpus.front().size(), cfg.hidden, cfg.steps, seed}, &sch);
  train_denoiser(net, sch, corpus,
                 DenoiserTrainConfig{cfg.pretrain_iterations, cfg.batch_size, cfg.lr,
                                     derive_seed(seed, {1})});
  return net;
}

// Copies `pretrained` and continues training on `target` at lr / 10.
inline Denoiser<float> finetune_denoiser(const Denoiser<float>& pretrained,
                                         const std::vector<std::vector<float>>& target,
                                         const PtdaConfig& cfg, std::uint64_t seed) {
  if (!target.empty() && target.front().size() != pretrained.config().dim)
    fail(ErrorCode::ShapeMismatch, "fine-tuning data has " +
                                       std::to_string(target.front().size()) +
                                       " values per row, pretrained denoiser expects " +
                                       std::to_string(pretrained.config().dim));
  auto net = pretrained.clone();
  train_denoiser(net, cfg.schedule(), target,
                 DenoiserTrainConfig{cfg.finetune_iterations, cfg.batch_size, cfg.lr / 10.0,
                                     derive_seed(seed, {2})});
  return net;
}

inline Denoiser<float> pretrain_finetune(const std::vector<std::vector<float>>& pretrain_data,
                                         const std::vector<std::vector<float>>& target_data,
                                         const PtdaConfig& cfg, std::uint64_t seed) {
  auto base = pretrain_denoiser(pretrain_data, cfg, seed);
  return finetune_denoiser(base, target_data, cfg, seed);
}

// Appends ceil(ratio * n_class) generated tensors per class present in
// `real`. Each generated tensor copies layout metadata from a real template,
// carries origin Generated, and an MMSE drawn from that class's real values.
inline std::vector<FeatureTensor> generate_for_classes(
    std::span<const FeatureTensor* const> real,
    const std::map<int, const Denoiser<float>*>& denoisers, const PtdaConfig& cfg,
    double ratio, std::uint64_t seed) {
  std::vector<FeatureTensor> out;
  if (ratio < 0) fail(ErrorCode::InvalidConfig, "augmentation ratio must be >= 0");
  if (ratio == 0 || real.empty()) return out;
  std::map<int, std::vector<const FeatureTensor*>> by_class;
  for (const auto* t : real) by_class[t->class_label].push_back(t);
  const auto sch = cfg.schedule();
  for (const auto& [cls, members] : by_class) {
    auto it = denoisers.find(cls);
    if (it == denoisers.end() || !it->second)
      fail(ErrorCode::MissingClassParams, "no denoiser for class " + std::to_string(cls));
    const auto n = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(members.size()) - 1e-9));
    const auto cls_seed = derive_seed(seed, {static_cast<std::uint64_t>(cls)});
    auto samples = p_sample_loop(*it->second, sch, n, cls_seed);
    Rng rng(derive_seed(cls_seed, {0x6d6d7365ULL}));
    std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& tpl = *members.front();
      FeatureTensor g;
      g.num_features = tpl.num_features;
      g.num_channels = tpl.num_channels;
      g.num_epochs = tpl.num_epochs;
      if (samples[i].size() != tpl.values.size())
        fail(ErrorCode::ShapeMismatch, "generated sample size differs from real tensors");
      g.values = std::move(samples[i]);
      g.feature_names = tpl.feature_names;
      g.channel_names = tpl.channel_names;
      g.subject_id = "GEN-" + std::to_string(cls) + "-" + std::to_string(i);
      g.class_label = cls;
      g.mmse = members[pick(rng)]->mmse;
      g.origin = Origin::Generated;
      out.push_back(std::move(g));
    }
  }
  return out;
}

// Real tensors followed by their generated companions.
inline std::vector<FeatureTensor> augment_dataset(
    const std::vector<FeatureTensor>& real,
    const std::map<int, const Denoiser<float>*>& denoisers, const PtdaConfig& cfg,
    double ratio, std::uint64_t seed) {
  std::vector<const FeatureTensor*> ptrs;
  for (const auto& t : real) ptrs.push_back(&t);
  auto gen = generate_for_classes(ptrs, denoisers, cfg, ratio, seed);
  std::vector<FeatureTensor> out = real;
  for (auto& g : gen) out.push_back(std::move(g));
  return out;
}

template <class T>
Checkpoint denoiser_checkpoint(const Denoiser<T>& net, nlohmann::json extra = {}) {
  Checkpoint ck;
  ck.meta = {{"kind", "tgsn-denoiser"},
             {"dim", net.config().dim},
             {"hidden", net.config().hidden},
             {"steps", net.config().steps},
             {"seed", net.config().seed}};
  if (extra.is_object())
    for (auto& [k, v] : extra.items()) ck.meta[k] = v;
  append_params(ck, net.params());
  return ck;
}

inline Denoiser<float> denoiser_from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "tgsn-denoiser")
    fail(ErrorCode::MalformedHeader, "checkpoint is not a denoiser");
  DenoiserConfig c{ck.meta.at("dim").get<std::size_t>(), ck.meta.at("hidden").get<std::size_t>(),
                   ck.meta.at("steps").get<std::size_t>(), ck.meta.at("seed").get<std::uint64_t>()};
  Denoiser<float> net(c);
  load_params(ck, net.params());
  return net;
}

}  // namespace tgsn
