#pragma once

// Full network: GSA stack over the feature map, then task-guided queries.

#include <cstdint>
#include <string>

#include "json.hpp"
#include "tgsn/features.hpp"
#include "tgsn/gsa.hpp"
#include "tgsn/params.hpp"
#include "tgsn/tgq.hpp"

namespace tgsn {

struct ModelConfig {
  std::size_t num_features = 25;
  std::size_t num_channels = 8;
  std::size_t num_epochs = 5;
  std::size_t num_classes = 3;
  GsaConfig gsa;
  std::size_t heads = 4;
  double dropout = 0.1;
  bool use_gsa = true;  // false: entry projection only (K = 0)
  bool use_tgq = true;  // false: mean-pooled tokens feed the task FFNs
  double mmse_init = 0.0;
  std::uint64_t seed = 0;

  TgqConfig tgq() const {
    TgqConfig t;
    t.width = gsa.width;
    t.heads = heads;
    t.ffn_expansion = gsa.ffn_expansion;
    t.num_classes = num_classes;
    t.dropout = dropout;
    t.droppath_rate = gsa.droppath_rate;
    t.use_queries = use_tgq;
    return t;
  }
};

inline nlohmann::json to_json(const GsaConfig& g) {
  return {{"blocks", g.blocks},
          {"width", g.width},
          {"dw_kernel", g.dw_kernel},
          {"dilation", g.dilation},
          {"ffn_kernel", g.ffn_kernel},
          {"ffn_expansion", g.ffn_expansion},
          {"droppath_rate", g.droppath_rate},
          {"lambda_init", g.lambda_init}};
}

inline GsaConfig gsa_config_from_json(const nlohmann::json& j, GsaConfig g = {}) {
  g.blocks = j.value("blocks", g.blocks);
  g.width = j.value("width", g.width);
  g.dw_kernel = j.value("dw_kernel", g.dw_kernel);
  g.dilation = j.value("dilation", g.dilation);
  g.ffn_kernel = j.value("ffn_kernel", g.ffn_kernel);
  g.ffn_expansion = j.value("ffn_expansion", g.ffn_expansion);
  g.droppath_rate = j.value("droppath_rate", g.droppath_rate);
  g.lambda_init = j.value("lambda_init", g.lambda_init);
  return g;
}

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"num_features", m.num_features}, {"num_channels", m.num_channels},
          {"num_epochs", m.num_epochs},     {"num_classes", m.num_classes},
          {"gsa", to_json(m.gsa)},          {"heads", m.heads},
          {"dropout", m.dropout},           {"use_gsa", m.use_gsa},
          {"use_tgq", m.use_tgq},           {"mmse_init", m.mmse_init},
          {"seed", m.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.num_features = j.at("num_features").get<std::size_t>();
  m.num_channels = j.at("num_channels").get<std::size_t>();
  m.num_epochs = j.at("num_epochs").get<std::size_t>();
  m.num_classes = j.at("num_classes").get<std::size_t>();
  m.gsa = gsa_config_from_json(j.at("gsa"));
  m.heads = j.value("heads", m.heads);
  m.dropout = j.value("dropout", m.dropout);
  m.use_gsa = j.value("use_gsa", m.use_gsa);
  m.use_tgq = j.value("use_tgq", m.use_tgq);
  m.mmse_init = j.value("mmse_init", m.mmse_init);
  m.seed = j.value("seed", m.seed);
  return m;
}

template <class T>
class TgsnModel {
 public:
  using Tensor = ad::Tensor<T>;

  explicit TgsnModel(const ModelConfig& cfg)
      : cfg_(cfg),
        init_rng_(derive_seed(cfg.seed, {0x6d6f64656cULL})),
        gsa_(ps_, cfg.num_features, cfg.gsa, init_rng_, cfg.use_gsa),
        tgq_(ps_, cfg.tgq(), init_rng_) {
    if (cfg.num_features == 0 || cfg.num_channels == 0 || cfg.num_epochs == 0)
      fail(ErrorCode::InvalidConfig, "model input dimensions must be positive");
    ps_.get("tgq.mmse.head.bias").values()[0] = static_cast<T>(cfg.mmse_init);
  }

  TgsnModel(const TgsnModel&) = delete;
  TgsnModel& operator=(const TgsnModel&) = delete;

  // x [N, F, C, T1].
  TgqOutput<T> forward(const Tensor& x, const ForwardMode& mode) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.num_features || x.dim(2) != cfg_.num_channels ||
        x.dim(3) != cfg_.num_epochs)
      ad::shape_error("model input", x.shape(),
                      {x.rank() ? x.dim(0) : 0, cfg_.num_features, cfg_.num_channels,
                       cfg_.num_epochs});
    return tgq_.forward(gsa_.tokens(x, mode), mode);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return ps_; }
  const ParamSet<T>& params() const { return ps_; }
  const GsaStack<T>& gsa() const { return gsa_; }
  const TgqModule<T>& tgq() const { return tgq_; }

 private:
  ModelConfig cfg_;
  ParamSet<T> ps_;
  Rng init_rng_;
  GsaStack<T> gsa_;
  TgqModule<T> tgq_;
};

// Stacks feature tensors [F][C][T1] into a batch [N, F, C, T1].
template <class T, class Range>
ad::Tensor<T> stack_batch(const Range& tensors, std::size_t F, std::size_t C, std::size_t T1) {
  std::vector<T> v;
  std::size_t n = 0;
  for (const auto* ft : tensors) {
    if (ft->num_features != F || ft->num_channels != C || ft->num_epochs != T1)
      fail(ErrorCode::ShapeMismatch,
           "feature tensor " + ft->subject_id + " is " + std::to_string(ft->num_features) + "x" +
               std::to_string(ft->num_channels) + "x" + std::to_string(ft->num_epochs) +
               ", expected " + std::to_string(F) + "x" + std::to_string(C) + "x" +
               std::to_string(T1));
    v.insert(v.end(), ft->values.begin(), ft->values.end());
    ++n;
  }
  return ad::Tensor<T>::from({n, F, C, T1}, std::move(v));
}

}  // namespace tgsn
