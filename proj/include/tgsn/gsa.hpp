#pragma once

// Gated spatiotemporal attention stack over [N, E, C, T1] feature maps.

#include <string>
#include <vector>

#include "tgsn/autodiff.hpp"
#include "tgsn/params.hpp"

namespace tgsn {

struct GsaConfig {
  std::size_t blocks = 3;  // K
  std::size_t width = 16;  // E
  std::size_t dw_kernel = 5;
  std::size_t dilation = 3;
  std::size_t ffn_kernel = 3;
  std::size_t ffn_expansion = 4;
  double droppath_rate = 0.1;
  double lambda_init = 1e-2;
};

inline void validate(const GsaConfig& c) {
  if (c.width == 0) fail(ErrorCode::InvalidConfig, "GSA width must be positive");
  if (c.dw_kernel % 2 == 0 || c.ffn_kernel % 2 == 0)
    fail(ErrorCode::InvalidConfig, "depthwise kernels must be odd");
  if (c.dilation != 3) fail(ErrorCode::InvalidConfig, "dilated depthwise conv uses dilation 3");
  if (c.ffn_expansion == 0) fail(ErrorCode::InvalidConfig, "ffn_expansion must be positive");
  if (!(c.droppath_rate >= 0 && c.droppath_rate <= 1))
    fail(ErrorCode::InvalidConfig, "droppath_rate in [0,1]");
}

// Forward context shared by every stochastic layer of one pass.
struct ForwardMode {
  bool train = false;
  Rng* rng = nullptr;
};

template <class T>
struct GsaBlock {
  using Tensor = ad::Tensor<T>;

  Tensor bn1_w, bn1_b, bn2_w, bn2_b;
  ad::BatchNormBuffers<T>* bn1 = nullptr;
  ad::BatchNormBuffers<T>* bn2 = nullptr;
  Tensor proj_w, proj_b, dw_w, dw_b, dwd_w, dwd_b, gate_w, gate_b;
  Tensor ffn1_w, ffn1_b, ffn_dw_w, ffn_dw_b, ffn2_w, ffn2_b;
  Tensor lambda1, lambda2;
  GsaConfig cfg;

  GsaBlock(ParamSet<T>& ps, const std::string& prefix, const GsaConfig& c, Rng& rng) : cfg(c) {
    const auto E = c.width, H = c.width * c.ffn_expansion, k = c.dw_kernel, kf = c.ffn_kernel;
    bn1_w = ps.add_constant(prefix + "bn1.weight", {E}, T(1));
    bn1_b = ps.add_constant(prefix + "bn1.bias", {E}, T(0));
    bn1 = ps.add_buffers(prefix + "bn1", E);
    proj_w = ps.add_normal(prefix + "gsta.proj.weight", {E, E}, rng, fan_in_sd(E));
    proj_b = ps.add_constant(prefix + "gsta.proj.bias", {E}, T(0));
    dw_w = ps.add_normal(prefix + "gsta.dw.weight", {E, k, k}, rng, fan_in_sd(k * k));
    dw_b = ps.add_constant(prefix + "gsta.dw.bias", {E}, T(0));
    dwd_w = ps.add_normal(prefix + "gsta.dwd.weight", {E, k, k}, rng, fan_in_sd(k * k));
    dwd_b = ps.add_constant(prefix + "gsta.dwd.bias", {E}, T(0));
    gate_w = ps.add_normal(prefix + "gsta.gate.weight", {2 * E, E}, rng, fan_in_sd(E));
    gate_b = ps.add_constant(prefix + "gsta.gate.bias", {2 * E}, T(0));
    lambda1 = ps.add_constant(prefix + "lambda1", {E}, static_cast<T>(c.lambda_init));
    bn2_w = ps.add_constant(prefix + "bn2.weight", {E}, T(1));
    bn2_b = ps.add_constant(prefix + "bn2.bias", {E}, T(0));
    bn2 = ps.add_buffers(prefix + "bn2", E);
    ffn1_w = ps.add_normal(prefix + "ffn.fc1.weight", {H, E}, rng, fan_in_sd(E));
    ffn1_b = ps.add_constant(prefix + "ffn.fc1.bias", {H}, T(0));
    ffn_dw_w = ps.add_normal(prefix + "ffn.dw.weight", {H, kf, kf}, rng, fan_in_sd(kf * kf));
    ffn_dw_b = ps.add_constant(prefix + "ffn.dw.bias", {H}, T(0));
    ffn2_w = ps.add_normal(prefix + "ffn.fc2.weight", {E, H}, rng, fan_in_sd(H));
    ffn2_b = ps.add_constant(prefix + "ffn.fc2.bias", {E}, T(0));
    lambda2 = ps.add_constant(prefix + "lambda2", {E}, static_cast<T>(c.lambda_init));
  }

  // Projection (1x1 conv + GELU), depthwise conv, dilated depthwise conv,
  // then a 1x1 conv split into value and gate halves.
  Tensor gsta_unit(const Tensor& x) const {
    auto local = ad::depthwise_conv2d(ad::gelu(ad::conv2d_1x1(x, proj_w, proj_b)), dw_w, dw_b);
    auto context = ad::depthwise_dilated_conv2d(local, dwd_w, dwd_b, cfg.dilation);
    auto [g1, g2] = ad::split_channels(ad::conv2d_1x1(context, gate_w, gate_b));
    return ad::mul(g1, ad::sigmoid(g2));
  }

  Tensor conv_ffn(const Tensor& x) const {
    auto h = ad::conv2d_1x1(x, ffn1_w, ffn1_b);
    h = ad::gelu(ad::depthwise_conv2d(h, ffn_dw_w, ffn_dw_b));
    return ad::conv2d_1x1(h, ffn2_w, ffn2_b);
  }

  Tensor forward(const Tensor& x, const ForwardMode& mode) const {
    auto g = gsta_unit(ad::batchnorm2d(x, bn1_w, bn1_b, *bn1, mode.train));
    auto mid = ad::add(x, ad::droppath(ad::scale_channels(g, lambda1), cfg.droppath_rate,
                                       mode.train, mode.rng));
    auto f = conv_ffn(ad::batchnorm2d(mid, bn2_w, bn2_b, *bn2, mode.train));
    return ad::add(mid, ad::droppath(ad::scale_channels(f, lambda2), cfg.droppath_rate,
                                     mode.train, mode.rng));
  }
};

// Entry 1x1 projection F -> E, then K blocks.
template <class T>
struct GsaStack {
  using Tensor = ad::Tensor<T>;

  Tensor entry_w, entry_b;
  std::vector<GsaBlock<T>> blocks;

  GsaStack(ParamSet<T>& ps, std::size_t in_features, const GsaConfig& cfg, Rng& rng,
           bool use_blocks = true) {
    validate(cfg);
    entry_w = ps.add_normal("gsa.entry.weight", {cfg.width, in_features}, rng, fan_in_sd(in_features));
    entry_b = ps.add_constant("gsa.entry.bias", {cfg.width}, T(0));
    if (use_blocks)
      for (std::size_t k = 0; k < cfg.blocks; ++k)
        blocks.emplace_back(ps, "gsa.k" + std::to_string(k) + ".", cfg, rng);
  }

  // Returns X_K as [N, E, C, T1].
  Tensor forward(const Tensor& x, const ForwardMode& mode) const {
    auto h = ad::conv2d_1x1(x, entry_w, entry_b);
    for (const auto& b : blocks) h = b.forward(h, mode);
    return h;
  }

  // Token sequence [N, C*T1, E].
  Tensor tokens(const Tensor& x, const ForwardMode& mode) const {
    return ad::flatten_permute(forward(x, mode));
  }
};

}  // namespace tgsn
