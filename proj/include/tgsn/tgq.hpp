#pragma once

// Task-guided queries: one learnable query per task cross-attends over the
// GSA token sequence, then a task FFN and a linear output head.

#include <array>
#include <string>
#include <vector>

#include "tgsn/autodiff.hpp"
#include "tgsn/gsa.hpp"
#include "tgsn/params.hpp"

namespace tgsn {

enum class Task { Dementia = 0, Mmse = 1 };
inline constexpr std::array<Task, 2> kTasks = {Task::Dementia, Task::Mmse};

inline const char* to_string(Task t) { return t == Task::Dementia ? "dementia" : "mmse"; }

struct TgqConfig {
  std::size_t width = 16;  // E
  std::size_t heads = 4;
  std::size_t ffn_expansion = 4;
  std::size_t num_classes = 3;
  double dropout = 0.1;
  double droppath_rate = 0.1;
  bool use_queries = true;  // false: mean-pooled tokens replace the cross-attention
};

inline void validate(const TgqConfig& c) {
  if (c.width == 0 || c.heads == 0 || c.width % c.heads != 0)
    fail(ErrorCode::InvalidConfig, "embedding width " + std::to_string(c.width) +
                                       " not divisible by " + std::to_string(c.heads) + " heads");
  if (c.num_classes < 2) fail(ErrorCode::InvalidConfig, "num_classes must be at least 2");
}

template <class T>
struct TgqOutput {
  ad::Tensor<T> logits;  // [N, K]
  ad::Tensor<T> mmse;    // [N, 1]
  // Attention probabilities per task, [N, heads, 1, L]; empty when queries are off.
  std::array<std::vector<T>, 2> attention;
};

template <class T>
struct TaskHead {
  using Tensor = ad::Tensor<T>;

  Tensor query, ln_q_w, ln_q_b;
  Tensor ffn_ln_w, ffn_ln_b, fc1_w, fc1_b, fc2_w, fc2_b;
  Tensor out_w, out_b;

  TaskHead(ParamSet<T>& ps, const std::string& task, const TgqConfig& c, std::size_t outputs,
           Rng& rng) {
    const auto E = c.width, H = c.width * c.ffn_expansion;
    const std::string p = "tgq." + task + ".";
    query = ps.add_normal(p + "query", {E}, rng);
    ln_q_w = ps.add_constant(p + "ln_q.weight", {E}, T(1));
    ln_q_b = ps.add_constant(p + "ln_q.bias", {E}, T(0));
    ffn_ln_w = ps.add_constant(p + "ffn.ln.weight", {E}, T(1));
    ffn_ln_b = ps.add_constant(p + "ffn.ln.bias", {E}, T(0));
    fc1_w = ps.add_normal(p + "ffn.fc1.weight", {E, H}, rng, fan_in_sd(E));
    fc1_b = ps.add_constant(p + "ffn.fc1.bias", {H}, T(0));
    fc2_w = ps.add_normal(p + "ffn.fc2.weight", {H, E}, rng, fan_in_sd(H));
    fc2_b = ps.add_constant(p + "ffn.fc2.bias", {E}, T(0));
    out_w = ps.add_normal(p + "head.weight", {E, outputs}, rng, fan_in_sd(E));
    out_b = ps.add_constant(p + "head.bias", {outputs}, T(0));
  }

  Tensor ffn(const Tensor& x, const TgqConfig& c, const ForwardMode& mode) const {
    auto h = ad::gelu(ad::linear(ad::layernorm(x, ffn_ln_w, ffn_ln_b), fc1_w, fc1_b));
    h = ad::dropout(h, c.dropout, mode.train, mode.rng);
    return ad::linear(h, fc2_w, fc2_b);
  }
};

template <class T>
struct TgqModule {
  using Tensor = ad::Tensor<T>;

  TgqConfig cfg;
  Tensor ln_kv_w, ln_kv_b, wq, bq, wk, bk, wv, bv, wo, bo;
  std::vector<TaskHead<T>> tasks;

  TgqModule(ParamSet<T>& ps, const TgqConfig& c, Rng& rng) : cfg(c) {
    validate(c);
    const auto E = c.width;
    ln_kv_w = ps.add_constant("tgq.ln_kv.weight", {E}, T(1));
    ln_kv_b = ps.add_constant("tgq.ln_kv.bias", {E}, T(0));
    wq = ps.add_normal("tgq.attn.wq", {E, E}, rng, fan_in_sd(E));
    bq = ps.add_constant("tgq.attn.bq", {E}, T(0));
    wk = ps.add_normal("tgq.attn.wk", {E, E}, rng, fan_in_sd(E));
    bk = ps.add_constant("tgq.attn.bk", {E}, T(0));
    wv = ps.add_normal("tgq.attn.wv", {E, E}, rng, fan_in_sd(E));
    bv = ps.add_constant("tgq.attn.bv", {E}, T(0));
    wo = ps.add_normal("tgq.attn.wo", {E, E}, rng, fan_in_sd(E));
    bo = ps.add_constant("tgq.attn.bo", {E}, T(0));
    tasks.emplace_back(ps, "dementia", c, c.num_classes, rng);
    tasks.emplace_back(ps, "mmse", c, 1, rng);
  }

  TaskHead<T>& head(Task t) { return tasks[static_cast<std::size_t>(t)]; }
  const TaskHead<T>& head(Task t) const { return tasks[static_cast<std::size_t>(t)]; }

  // tokens [N, L, E].
  TgqOutput<T> forward(const Tensor& tokens, const ForwardMode& mode) const {
    if (tokens.rank() != 3 || tokens.dim(2) != cfg.width || tokens.dim(1) == 0)
      fail(ErrorCode::ShapeError, "tgq tokens must be [N, L>0, " + std::to_string(cfg.width) +
                                      "], got " + ad::shape_str(tokens.shape()));
    const std::size_t N = tokens.dim(0), E = cfg.width;
    TgqOutput<T> out;
    Tensor kp, vp, pooled;
    if (cfg.use_queries) {
      auto kv = ad::layernorm(tokens, ln_kv_w, ln_kv_b);
      kp = ad::linear(kv, wk, bk);
      vp = ad::linear(kv, wv, bv);
    } else {
      pooled = ad::mean_tokens(tokens);
    }
    std::array<Tensor, 2> results;
    for (Task t : kTasks) {
      const auto& th = head(t);
      Tensor xa;
      if (cfg.use_queries) {
        auto q = ad::broadcast_batch(ad::layernorm(th.query, th.ln_q_w, th.ln_q_b), N);
        auto qp = ad::linear(q, wq, bq);
        auto att = ad::scaled_dot_product_attention(qp, kp, vp, cfg.heads,
                                                    &out.attention[static_cast<std::size_t>(t)]);
        xa = ad::add(ad::reshape(ad::linear(att, wo, bo), {N, E}),
                     ad::reshape(ad::broadcast_batch(th.query, N), {N, E}));
      } else {
        xa = pooled;
      }
      auto xq = ad::add(xa, ad::droppath(th.ffn(xa, cfg, mode), cfg.droppath_rate, mode.train,
                                         mode.rng));
      results[static_cast<std::size_t>(t)] = ad::linear(xq, th.out_w, th.out_b);
    }
    out.logits = results[0];
    out.mmse = results[1];
    return out;
  }
};

// Head-averaged attention of one sample, summed over the T1 epochs of each
// channel and normalized over channels. `weights` is [N, heads, 1, C*T1] with
// token index c*T1 + t.
template <class T>
std::vector<double> attention_map(const std::vector<T>& weights, std::size_t sample,
                                  std::size_t heads, std::size_t channels, std::size_t epochs) {
  const std::size_t L = channels * epochs;
  if (weights.size() < (sample + 1) * heads * L)
    fail(ErrorCode::ShapeError, "attention buffer too small for sample " + std::to_string(sample));
  std::vector<double> m(channels, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const T* a = weights.data() + (sample * heads + h) * L;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t t = 0; t < epochs; ++t) m[c] += a[c * epochs + t];
  }
  double s = 0;
  for (double v : m) s += v;
  for (double& v : m) v = s > 0 ? v / s : 1.0 / static_cast<double>(channels);
  return m;
}

}  // namespace tgsn
