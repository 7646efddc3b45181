#pragma once

// Joint training with dynamic task weighting, early stopping, metrics,
// k-fold orchestration and data-hygiene bookkeeping.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "tgsn/data_model.hpp"
#include "tgsn/diffusion.hpp"
#include "tgsn/features.hpp"
#include "tgsn/model.hpp"

namespace tgsn {

// ---------------------------------------------------------------------------
// Dynamic task weighting

struct LossWeightConfig {
  std::size_t tasks = 2;  // N
  double xi = 5.0;
};

// lambda_i = N * softmax_i(w / xi) with w_i = curr_i / prev_i. Epoch 1 gets
// equal weights of 1.
inline std::vector<double> update_task_weights(const std::vector<double>& prev,
                                               const std::vector<double>& curr,
                                               const LossWeightConfig& cfg, std::size_t epoch) {
  if (cfg.tasks == 0 || !(cfg.xi > 0))
    fail(ErrorCode::InvalidConfig, "task weighting needs N >= 1 and xi > 0");
  if (epoch <= 1) return std::vector<double>(cfg.tasks, 1.0);
  if (prev.size() != cfg.tasks || curr.size() != cfg.tasks)
    fail(ErrorCode::DimensionMismatch, "loss vectors must have one entry per task");
  std::vector<double> z(cfg.tasks);
  for (std::size_t i = 0; i < cfg.tasks; ++i) {
    if (!(prev[i] > 0) || !std::isfinite(prev[i]) || !std::isfinite(curr[i]))
      fail(ErrorCode::DegenerateLossRatio,
           "previous loss of task " + std::to_string(i) + " is " + io::fmt9(prev[i]));
    z[i] = curr[i] / prev[i] / cfg.xi;
  }
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (double& v : z) s += (v = std::exp(v - mx));
  const auto N = static_cast<double>(cfg.tasks);
  for (double& v : z) v = N * v / s;
  return z;
}

// Epoch-mean losses seen so far; weights for the next epoch use the ratio
// of the two most recent epochs.
class TaskWeightState {
 public:
  explicit TaskWeightState(LossWeightConfig cfg = {}) : cfg_(cfg) {}

  std::vector<double> next_weights() const {
    const std::size_t e = history_.size() + 1;
    if (history_.size() < 2) return update_task_weights({}, {}, cfg_, 1);
    return update_task_weights(history_[history_.size() - 2], history_.back(), cfg_, e);
  }
  void record(std::vector<double> epoch_losses) { history_.push_back(std::move(epoch_losses)); }
  const std::vector<std::vector<double>>& history() const { return history_; }

 private:
  LossWeightConfig cfg_;
  std::vector<std::vector<double>> history_;
};

template <class T>
struct LossParts {
  ad::Tensor<T> total, ce, mse;
};

// lambda_ce * CE(logits, classes) + lambda_mse * MSE(mmse_hat, mmse) on the raw scale.
// With `scored`, only rows flagged there enter the MSE term.
template <class T>
LossParts<T> total_loss(const ad::Tensor<T>& logits, const std::vector<int>& classes,
                        const ad::Tensor<T>& mmse_hat, const std::vector<T>& mmse,
                        const std::vector<double>& lambdas,
                        const std::vector<unsigned char>* scored = nullptr) {
  if (lambdas.size() != 2) fail(ErrorCode::DimensionMismatch, "two task weights expected");
  LossParts<T> out;
  out.ce = ad::cross_entropy(logits, classes);
  out.mse = scored ? ad::masked_mse(mmse_hat, mmse, *scored) : ad::mse(mmse_hat, mmse);
  out.total = ad::add(ad::scale(out.ce, static_cast<T>(lambdas[0])),
                      ad::scale(out.mse, static_cast<T>(lambdas[1])));
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double acc = 0, auc = 0, sen = 0, spe = 0, rmse = 0;
};

struct Prediction {
  std::string subject_id;
  int label = 0;
  int predicted = 0;
  std::vector<double> probs;
  double mmse_true = 0;
  double mmse_pred = 0;
};

// Mann-Whitney rank statistic with tied scores sharing their average rank.
inline double auc_binary(const std::vector<double>& scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::size_t npos = 0;
  for (bool p : positive) npos += p;
  const std::size_t nneg = n - npos;
  if (npos == 0 || nneg == 0)
    fail(ErrorCode::UndefinedAuc, "AUC needs both positive and negative samples");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (positive[idx[k]]) rank_sum += avg;
    i = j + 1;
  }
  const double u = rank_sum - static_cast<double>(npos) * static_cast<double>(npos + 1) / 2.0;
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

// Percentages for ACC/AUC/SEN/SPE. Two classes: class 1 is positive and the
// AUC uses its probability. More classes: macro one-vs-rest averages.
inline Metrics compute_metrics(const std::vector<Prediction>& preds, std::size_t num_classes) {
  if (preds.empty()) fail(ErrorCode::EmptySplit, "no predictions to score");
  if (num_classes < 2) fail(ErrorCode::InvalidConfig, "metrics need at least two classes");
  const auto n = static_cast<double>(preds.size());
  Metrics m;
  double correct = 0, se = 0;
  std::set<int> present;
  for (const auto& p : preds) {
    if (p.label < 0 || static_cast<std::size_t>(p.label) >= num_classes)
      fail(ErrorCode::ClassOutOfRange, "label " + std::to_string(p.label));
    correct += p.label == p.predicted;
    se += (p.mmse_pred - p.mmse_true) * (p.mmse_pred - p.mmse_true);
    present.insert(p.label);
  }
  m.acc = 100.0 * correct / n;
  m.rmse = std::sqrt(se / n);
  if (present.size() < 2) fail(ErrorCode::UndefinedAuc, "targets contain a single class");

  auto one_vs_rest = [&](int k, double& sen, double& spe, double& auc) {
    double tp = 0, fn = 0, tn = 0, fp = 0;
    std::vector<double> scores;
    std::vector<bool> pos;
    for (const auto& p : preds) {
      const bool is_pos = p.label == k, said_pos = p.predicted == k;
      tp += is_pos && said_pos;
      fn += is_pos && !said_pos;
      tn += !is_pos && !said_pos;
      fp += !is_pos && said_pos;
      if (p.probs.size() != num_classes)
        fail(ErrorCode::DimensionMismatch, "probability vector length differs from class count");
      scores.push_back(p.probs[static_cast<std::size_t>(k)]);
      pos.push_back(is_pos);
    }
    sen = tp + fn > 0 ? 100.0 * tp / (tp + fn) : 0.0;
    spe = tn + fp > 0 ? 100.0 * tn / (tn + fp) : 0.0;
    auc = 100.0 * auc_binary(scores, pos);
  };

  if (num_classes == 2) {
    one_vs_rest(1, m.sen, m.spe, m.auc);
  } else {
    for (std::size_t k = 0; k < num_classes; ++k) {
      double s, p, a;
      one_vs_rest(static_cast<int>(k), s, p, a);
      m.sen += s;
      m.spe += p;
      m.auc += a;
    }
    const auto K = static_cast<double>(num_classes);
    m.sen /= K;
    m.spe /= K;
    m.auc /= K;
  }
  return m;
}

struct Aggregate {
  Metrics mean, sd;
  std::size_t runs = 0;
};

// Mean and sample standard deviation over runs.
inline Aggregate aggregate(const std::vector<Metrics>& runs) {
  Aggregate a;
  a.runs = runs.size();
  if (runs.empty()) return a;
  auto field = [&](auto get, double& mean, double& sd) {
    double s = 0;
    for (const auto& r : runs) s += get(r);
    mean = s / static_cast<double>(runs.size());
    double ss = 0;
    for (const auto& r : runs) ss += (get(r) - mean) * (get(r) - mean);
    sd = runs.size() > 1 ? std::sqrt(ss / static_cast<double>(runs.size() - 1)) : 0.0;
  };
  field([](const Metrics& r) { return r.acc; }, a.mean.acc, a.sd.acc);
  field([](const Metrics& r) { return r.auc; }, a.mean.auc, a.sd.auc);
  field([](const Metrics& r) { return r.sen; }, a.mean.sen, a.sd.sen);
  field([](const Metrics& r) { return r.spe; }, a.mean.spe, a.sd.spe);
  field([](const Metrics& r) { return r.rmse; }, a.mean.rmse, a.sd.rmse);
  return a;
}

inline std::string format_pm(double mean, double sd) {
  return io::fmt_fixed(mean, 2) + " ± " + io::fmt_fixed(sd, 2);
}

// ---------------------------------------------------------------------------
// Provenance bookkeeping

inline constexpr const char* kPathNormalization = "normalization";
inline constexpr const char* kPathDiffusionTraining = "diffusion_training";
inline constexpr const char* kPathModelSelection = "model_selection";

class HygieneLedger {
 public:
  struct Entry {
    std::string subject_id;
    Origin origin;
  };

  template <class Range>
  void record(const std::string& path, const Range& tensors) {
    std::lock_guard lk(mu_);
    for (const auto* t : tensors) uses_[path].push_back({t->subject_id, t->origin});
  }

  // Generated samples or test subjects in any audited path.
  std::vector<std::string> violations(const std::vector<std::string>& test_ids) const {
    std::lock_guard lk(mu_);
    const std::set<std::string> test(test_ids.begin(), test_ids.end());
    std::vector<std::string> out;
    for (const auto& [path, entries] : uses_)
      for (const auto& e : entries) {
        if (e.origin == Origin::Generated) out.push_back(path + ": generated sample " + e.subject_id);
        if (test.count(e.subject_id)) out.push_back(path + ": test subject " + e.subject_id);
      }
    return out;
  }

  const std::map<std::string, std::vector<Entry>>& uses() const { return uses_; }

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::vector<Entry>> uses_;
};

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t epochs = 500;
  std::size_t patience = 100;
  std::size_t batch_size = 32;
  double lr = 1e-5;
  double xi = 5.0;
};

struct ExperimentConfig {
  std::string task = "3class";
  std::vector<int> classes;  // subset of source labels; empty keeps all
  std::size_t folds = 5;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  ModelConfig model;  // input dimensions are filled from the corpus
  TrainConfig train;
  bool use_ptda = true;
  PtdaConfig ptda;
};

inline ExperimentConfig full_profile() {
  ExperimentConfig c;
  c.ptda.steps = 1000;
  return c;
}

inline ExperimentConfig desk_profile() {
  ExperimentConfig c;
  c.train.epochs = 120;
  c.train.patience = 25;
  c.train.lr = 1e-3;
  c.ptda.steps = 50;
  c.ptda.hidden = 64;
  c.ptda.lr = 3e-2;
  c.ptda.finetune_iterations = 150;
  c.ptda.ratio = 2.0;
  return c;
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs}, {"patience", t.patience}, {"batch_size", t.batch_size},
          {"lr", t.lr},         {"xi", t.xi}};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  auto m = to_json(c.model);
  for (const char* k : {"num_features", "num_channels", "num_epochs", "num_classes", "mmse_init", "seed"})
    m.erase(k);
  return {{"task", c.task},   {"classes", c.classes},       {"folds", c.folds},
          {"seeds", c.seeds}, {"model", m},                 {"train", to_json(c.train)},
          {"use_ptda", c.use_ptda}, {"ptda", to_json(c.ptda)}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j, ExperimentConfig c) {
  try {
    c.task = j.value("task", c.task);
    c.classes = j.value("classes", c.classes);
    c.folds = j.value("folds", c.folds);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("gsa")) c.model.gsa = gsa_config_from_json(m.at("gsa"), c.model.gsa);
      c.model.heads = m.value("heads", c.model.heads);
      c.model.dropout = m.value("dropout", c.model.dropout);
      c.model.use_gsa = m.value("use_gsa", c.model.use_gsa);
      c.model.use_tgq = m.value("use_tgq", c.model.use_tgq);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.patience = t.value("patience", c.train.patience);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.lr = t.value("lr", c.train.lr);
      c.train.xi = t.value("xi", c.train.xi);
    }
    c.use_ptda = j.value("use_ptda", c.use_ptda);
    if (j.contains("ptda")) c.ptda = ptda_config_from_json(j.at("ptda"), c.ptda);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("experiment config: ") + e.what());
  }
  if (c.folds < 2) fail(ErrorCode::InvalidConfig, "folds must be at least 2");
  if (c.seeds.empty()) fail(ErrorCode::InvalidConfig, "at least one seed is required");
  if (c.train.batch_size == 0 || c.train.epochs == 0)
    fail(ErrorCode::InvalidConfig, "epochs and batch_size must be positive");
  if (!(c.train.lr > 0)) fail(ErrorCode::InvalidConfig, "lr must be positive");
  return c;
}

// ---------------------------------------------------------------------------
// Corpus helpers

// Keeps only the listed classes and relabels them 0..k-1 in list order.
inline std::vector<FeatureTensor> select_classes(const std::vector<FeatureTensor>& corpus,
                                                 const std::vector<int>& classes) {
  if (classes.empty()) return corpus;
  std::map<int, int> remap;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (!remap.emplace(classes[i], static_cast<int>(i)).second)
      fail(ErrorCode::InvalidConfig, "class " + std::to_string(classes[i]) + " listed twice");
  }
  std::vector<FeatureTensor> out;
  for (const auto& t : corpus) {
    auto it = remap.find(t.class_label);
    if (it == remap.end()) continue;
    out.push_back(t);
    out.back().class_label = it->second;
  }
  return out;
}

inline std::size_t count_classes(const std::vector<FeatureTensor>& corpus) {
  int mx = -1;
  for (const auto& t : corpus) mx = std::max(mx, t.class_label);
  return static_cast<std::size_t>(mx + 1);
}

// Sets input dimensions of `m` from the corpus.
inline ModelConfig fit_model_config(ModelConfig m, const std::vector<FeatureTensor>& corpus,
                                    std::size_t num_classes) {
  if (corpus.empty()) fail(ErrorCode::EmptySplit, "empty corpus");
  m.num_features = corpus.front().num_features;
  m.num_channels = corpus.front().num_channels;
  m.num_epochs = corpus.front().num_epochs;
  m.num_classes = num_classes;
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOutput {
  std::vector<Prediction> predictions;
  // Per sample and task: channel attention (empty when queries are off).
  std::vector<std::array<std::vector<double>, 2>> attention;
  double ce = 0, mse = 0;
};

inline EvalOutput evaluate_model(const TgsnModel<float>& model,
                                 const std::vector<const FeatureTensor*>& tensors,
                                 std::size_t batch_size = 64) {
  ad::NoGradGuard ng;
  const auto& c = model.config();
  EvalOutput out;
  double ce_sum = 0, se_sum = 0;
  for (std::size_t start = 0; start < tensors.size(); start += batch_size) {
    const auto end = std::min(tensors.size(), start + batch_size);
    std::vector<const FeatureTensor*> batch(tensors.begin() + start, tensors.begin() + end);
    auto x = stack_batch<float>(batch, c.num_features, c.num_channels, c.num_epochs);
    auto o = model.forward(x, ForwardMode{});
    const std::size_t K = c.num_classes;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Prediction p;
      p.subject_id = batch[i]->subject_id;
      p.label = batch[i]->class_label;
      p.mmse_true = batch[i]->mmse;
      p.mmse_pred = o.mmse[i];
      double mx = -1e300;
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(o.logits[i * K + k]));
      double z = 0;
      p.probs.resize(K);
      for (std::size_t k = 0; k < K; ++k) z += (p.probs[k] = std::exp(o.logits[i * K + k] - mx));
      for (auto& v : p.probs) v /= z;
      p.predicted = static_cast<int>(std::max_element(p.probs.begin(), p.probs.end()) - p.probs.begin());
      if (p.label >= 0 && static_cast<std::size_t>(p.label) < K)
        ce_sum += -std::log(std::max(p.probs[static_cast<std::size_t>(p.label)], 1e-300));
      se_sum += (p.mmse_pred - p.mmse_true) * (p.mmse_pred - p.mmse_true);
      std::array<std::vector<double>, 2> att;
      if (c.use_tgq)
        for (std::size_t task = 0; task < 2; ++task)
          att[task] = attention_map(o.attention[task], i, c.heads, c.num_channels, c.num_epochs);
      out.attention.push_back(std::move(att));
      out.predictions.push_back(std::move(p));
    }
  }
  if (!tensors.empty()) {
    out.ce = ce_sum / static_cast<double>(tensors.size());
    out.mse = se_sum / static_cast<double>(tensors.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Single fold

struct EpochLog {
  std::size_t epoch = 0;
  double lambda_ce = 1, lambda_mse = 1;
  double train_ce = 0, train_mse = 0;
  double val_loss = 0;
  double val_acc = 0;
};

struct FoldResult {
  int fold = 0;
  std::uint64_t seed = 0;
  Metrics metrics;
  std::vector<Prediction> predictions;
  std::vector<std::array<std::vector<double>, 2>> test_attention;
  std::vector<std::string> test_channels;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  std::size_t train_real = 0, train_generated = 0;
  std::vector<std::string> violations;
  Checkpoint checkpoint;
};

inline std::vector<const FeatureTensor*> pointers(const std::vector<FeatureTensor>& v) {
  std::vector<const FeatureTensor*> out;
  out.reserve(v.size());
  for (const auto& t : v) out.push_back(&t);
  return out;
}

inline Checkpoint model_checkpoint(const TgsnModel<float>& model, const FeatureStats& stats,
                                   const FeatureTensor& layout, nlohmann::json extra = {}) {
  Checkpoint ck;
  ck.meta = {{"kind", "tgsn-model"},
             {"model", to_json(model.config())},
             {"feature_mean", stats.mean},
             {"feature_sd", stats.sd},
             {"feature_names", layout.feature_names},
             {"channel_names", layout.channel_names}};
  if (extra.is_object())
    for (auto& [k, v] : extra.items()) ck.meta[k] = v;
  append_params(ck, model.params());
  return ck;
}

struct LoadedModel {
  std::unique_ptr<TgsnModel<float>> model;
  FeatureStats stats;
  std::vector<std::string> channel_names;
};

inline LoadedModel model_from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "tgsn-model")
    fail(ErrorCode::MalformedHeader, "checkpoint is not a TGSN model");
  LoadedModel lm;
  try {
    lm.model = std::make_unique<TgsnModel<float>>(model_config_from_json(ck.meta.at("model")));
    lm.stats.mean = ck.meta.at("feature_mean").get<std::vector<double>>();
    lm.stats.sd = ck.meta.at("feature_sd").get<std::vector<double>>();
    lm.channel_names = ck.meta.at("channel_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedHeader, std::string("checkpoint meta: ") + e.what());
  }
  load_params(ck, lm.model->params());
  return lm;
}

// Trains on split.train (plus generated samples when a pretrained denoiser is
// given), selects the epoch with the lowest validation loss, scores split.test.
inline FoldResult train_fold(const std::vector<FeatureTensor>& corpus, const DatasetSplit& split,
                             const ExperimentConfig& cfg, std::uint64_t seed,
                             const Denoiser<float>* pretrained = nullptr,
                             HygieneLedger* ledger = nullptr) {
  HygieneLedger local;
  HygieneLedger& book = ledger ? *ledger : local;
  std::map<std::string, const FeatureTensor*> by_id;
  for (const auto& t : corpus) by_id[t.subject_id] = &t;
  auto gather = [&](const std::vector<std::string>& ids, const char* what) {
    if (ids.empty()) fail(ErrorCode::EmptySplit, std::string(what) + " partition is empty");
    std::vector<const FeatureTensor*> out;
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) fail(ErrorCode::FoldError, "unknown subject " + id);
      if (it->second->origin != Origin::Real)
        fail(ErrorCode::FoldError, "non-real tensor " + id + " in " + what + " partition");
      out.push_back(it->second);
    }
    return out;
  };
  const auto train_raw = gather(split.train, "train");
  const auto val_raw = gather(split.val, "val");
  const auto test_raw = gather(split.test, "test");
  const std::size_t K = std::max(count_classes(corpus), cfg.model.num_classes);

  book.record(kPathNormalization, train_raw);
  const auto stats = compute_feature_stats(train_raw);
  auto norm = [&](const std::vector<const FeatureTensor*>& in) {
    std::vector<FeatureTensor> out;
    for (const auto* t : in) out.push_back(normalize(*t, stats));
    return out;
  };
  auto train_set = norm(train_raw);
  const auto val_set = norm(val_raw);
  const auto test_set = norm(test_raw);

  FoldResult res;
  res.fold = split.fold_index;
  res.seed = seed;
  res.train_real = train_set.size();
  const auto fold_seed = derive_seed(seed, {static_cast<std::uint64_t>(split.fold_index)});

  if (cfg.use_ptda && cfg.ptda.ratio > 0) {
    std::optional<Denoiser<float>> base;
    if (!pretrained) {
      // No external corpus: pretrain on this fold's training pool.
      book.record(kPathDiffusionTraining, pointers(train_set));
      base.emplace(pretrain_denoiser(flatten_rows(pointers(train_set)), cfg.ptda,
                                     derive_seed(fold_seed, {0x707472ULL})));
      pretrained = &*base;
    }
    std::map<int, std::vector<const FeatureTensor*>> by_class;
    for (const auto& t : train_set) by_class[t.class_label].push_back(&t);
    std::vector<Denoiser<float>> tuned;
    tuned.reserve(by_class.size());
    std::map<int, const Denoiser<float>*> nets;
    for (const auto& [cls, members] : by_class) {
      book.record(kPathDiffusionTraining, members);
      tuned.push_back(finetune_denoiser(*pretrained, flatten_rows(members), cfg.ptda,
                                        derive_seed(fold_seed, {0x6674ULL, static_cast<std::uint64_t>(cls)})));
    }
    std::size_t i = 0;
    for (const auto& [cls, members] : by_class) nets[cls] = &tuned[i++];
    auto gen = generate_for_classes(pointers(train_set), nets, cfg.ptda, cfg.ptda.ratio,
                                    derive_seed(fold_seed, {0x67656eULL}));
    res.train_generated = gen.size();
    for (auto& g : gen) train_set.push_back(std::move(g));
  }

  double mmse_mean = 0;
  for (const auto* t : train_raw) mmse_mean += t->mmse;
  mmse_mean /= static_cast<double>(train_raw.size());

  ModelConfig mc = fit_model_config(cfg.model, train_set, K);
  mc.mmse_init = mmse_mean;
  mc.seed = derive_seed(fold_seed, {0x696e6974ULL});
  TgsnModel<float> model(mc);
  Adam<float> opt(AdamConfig{cfg.train.lr});
  TaskWeightState weights(LossWeightConfig{2, cfg.train.xi});
  Rng rng(derive_seed(fold_seed, {0x7368756666ULL}));

  const auto val_ptrs = pointers(val_set);
  book.record(kPathModelSelection, val_ptrs);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::size_t wait = 0;
  auto best_snapshot = model.params().snapshot();

  for (std::size_t epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    const auto lambdas = weights.next_weights();
    std::shuffle(order.begin(), order.end(), rng);
    double ce_sum = 0, mse_sum = 0;
    std::size_t mse_rows = 0;
    // Equal-sized batches (sizes differ by at most one) keep batch-norm
    // statistics from a tiny trailing batch out of training.
    const std::size_t nb = (order.size() + cfg.train.batch_size - 1) / cfg.train.batch_size;
    for (std::size_t b = 0; b < nb; ++b) {
      const auto start = b * order.size() / nb, end = (b + 1) * order.size() / nb;
      std::vector<const FeatureTensor*> batch;
      std::vector<int> cls;
      std::vector<float> mmse;
      std::vector<unsigned char> real;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&train_set[order[i]]);
        cls.push_back(train_set[order[i]].class_label);
        mmse.push_back(static_cast<float>(train_set[order[i]].mmse));
        real.push_back(train_set[order[i]].origin == Origin::Real);
      }
      auto x = stack_batch<float>(batch, mc.num_features, mc.num_channels, mc.num_epochs);
      model.params().zero_grad();
      auto out = model.forward(x, ForwardMode{true, &rng});
      auto loss = total_loss(out.logits, cls, out.mmse, mmse, lambdas, &real);
      if (!std::isfinite(loss.total.item()))
        fail(ErrorCode::Diverged, "training loss is not finite at epoch " + std::to_string(epoch));
      ad::backward(loss.total);
      opt.step(model.params());
      ce_sum += loss.ce.item() * static_cast<double>(batch.size());
      const auto scored = std::count(real.begin(), real.end(), 1);
      mse_sum += loss.mse.item() * static_cast<double>(scored);
      mse_rows += static_cast<std::size_t>(scored);
    }
    const auto n = static_cast<double>(order.size());
    weights.record({ce_sum / n, mse_sum / static_cast<double>(mse_rows)});

    const auto val = evaluate_model(model, val_ptrs);
    const double val_loss = lambdas[0] * val.ce + lambdas[1] * val.mse;
    if (!std::isfinite(val_loss))
      fail(ErrorCode::Diverged, "validation loss is not finite at epoch " + std::to_string(epoch));
    double hits = 0;
    for (const auto& p : val.predictions) hits += p.label == p.predicted;
    res.epochs.push_back({epoch, lambdas[0], lambdas[1], ce_sum / n,
                          mse_sum / static_cast<double>(mse_rows), val_loss,
                          100.0 * hits / static_cast<double>(val.predictions.size())});
    if (val_loss < best) {
      best = val_loss;
      res.best_epoch = epoch;
      best_snapshot = model.params().snapshot();
      wait = 0;
    } else if (++wait >= cfg.train.patience) {
      break;
    }
  }
  model.params().restore(best_snapshot);

  const auto test = evaluate_model(model, pointers(test_set));
  res.predictions = test.predictions;
  res.test_attention = test.attention;
  res.test_channels = test_set.front().channel_names;
  res.metrics = compute_metrics(res.predictions, K);
  res.violations = book.violations(split.test);
  res.checkpoint = model_checkpoint(model, stats, test_set.front(),
                                    {{"fold", split.fold_index}, {"seed", seed}});
  return res;
}

// ---------------------------------------------------------------------------
// Cross-validation

struct CvResult {
  std::vector<FoldResult> runs;
  Aggregate summary;
  std::vector<std::string> violations;
};

// Runs fn(i) for i in [0, n) on up to `jobs` threads.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lk(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

// `pretrain_corpus` (origin Pretrain) feeds one denoiser per seed, normalized
// with its own statistics. When empty, each fold pretrains on its training pool.
inline CvResult run_cv(const std::vector<FeatureTensor>& corpus_in,
                       const std::vector<FeatureTensor>& pretrain_corpus,
                       const ExperimentConfig& cfg, std::size_t jobs = 1) {
  auto corpus = select_classes(corpus_in, cfg.classes);
  if (corpus.empty()) fail(ErrorCode::EmptySplit, "corpus has no subjects for the selected classes");
  crop_to_common_epochs(corpus);
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (const auto& t : corpus) {
    ids.push_back(t.subject_id);
    labels.push_back(t.class_label);
  }

  std::vector<std::optional<Denoiser<float>>> base(cfg.seeds.size());
  if (cfg.use_ptda && cfg.ptda.ratio > 0 && !pretrain_corpus.empty()) {
    auto pre = pretrain_corpus;
    crop_to_common_epochs(pre);
    for (const auto& t : pre)
      if (t.num_features != corpus.front().num_features ||
          t.num_channels != corpus.front().num_channels ||
          t.num_epochs < corpus.front().num_epochs)
        fail(ErrorCode::ShapeMismatch, "pretraining corpus layout differs from target corpus");
    for (auto& t : pre) crop_epochs(t, corpus.front().num_epochs);
    const auto pstats = compute_feature_stats(pointers(pre));
    std::vector<std::vector<float>> rows;
    for (const auto& t : pre) rows.push_back(normalize(t, pstats).values);
    parallel_for(cfg.seeds.size(), jobs, [&](std::size_t s) {
      base[s].emplace(pretrain_denoiser(rows, cfg.ptda, derive_seed(cfg.seeds[s], {0x707265ULL})));
    });
  }

  struct Job {
    std::size_t seed_index;
    DatasetSplit split;
  };
  std::vector<Job> work;
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
    for (auto& sp : make_folds(ids, labels, static_cast<int>(cfg.folds), cfg.seeds[s]))
      work.push_back({s, std::move(sp)});

  CvResult res;
  res.runs.resize(work.size());
  std::vector<HygieneLedger> books(work.size());
  parallel_for(work.size(), jobs, [&](std::size_t i) {
    const auto& w = work[i];
    const Denoiser<float>* pre = base[w.seed_index] ? &*base[w.seed_index] : nullptr;
    res.runs[i] = train_fold(corpus, w.split, cfg, cfg.seeds[w.seed_index], pre, &books[i]);
  });
  std::vector<Metrics> ms;
  for (const auto& r : res.runs) {
    ms.push_back(r.metrics);
    for (const auto& v : r.violations)
      res.violations.push_back("seed " + std::to_string(r.seed) + " fold " +
                               std::to_string(r.fold) + ": " + v);
  }
  res.summary = aggregate(ms);
  return res;
}

// ---------------------------------------------------------------------------
// Result files

inline void write_results_csv(std::ostream& os, const std::string& task,
                              const std::vector<FoldResult>& runs) {
  os << "task,fold,seed,acc,auc,sen,spe,rmse\n";
  for (const auto& r : runs)
    os << task << ',' << r.fold << ',' << r.seed << ',' << io::fmt9(r.metrics.acc) << ','
       << io::fmt9(r.metrics.auc) << ',' << io::fmt9(r.metrics.sen) << ','
       << io::fmt9(r.metrics.spe) << ',' << io::fmt9(r.metrics.rmse) << '\n';
}

inline void write_epoch_log_csv(std::ostream& os, const std::vector<FoldResult>& runs) {
  os << "seed,fold,epoch,lambda_ce,lambda_mse,train_ce,train_mse,val_loss,val_acc\n";
  for (const auto& r : runs)
    for (const auto& e : r.epochs)
      os << r.seed << ',' << r.fold << ',' << e.epoch << ',' << io::fmt9(e.lambda_ce) << ','
         << io::fmt9(e.lambda_mse) << ',' << io::fmt9(e.train_ce) << ','
         << io::fmt9(e.train_mse) << ',' << io::fmt9(e.val_loss) << ',' << io::fmt9(e.val_acc)
         << '\n';
}

inline void write_predictions_csv(std::ostream& os, const std::vector<FoldResult>& runs) {
  os << "seed,fold,subject_id,label,predicted,mmse_true,mmse_pred\n";
  for (const auto& r : runs)
    for (const auto& p : r.predictions)
      os << r.seed << ',' << r.fold << ',' << p.subject_id << ',' << p.label << ','
         << p.predicted << ',' << io::fmt9(p.mmse_true) << ',' << io::fmt9(p.mmse_pred) << '\n';
}

inline nlohmann::json summary_json(const Aggregate& a) {
  auto m = [](const Metrics& x) {
    return nlohmann::json{{"acc", x.acc}, {"auc", x.auc}, {"sen", x.sen}, {"spe", x.spe},
                          {"rmse", x.rmse}};
  };
  return {{"runs", a.runs}, {"mean", m(a.mean)}, {"sd", m(a.sd)}};
}

}  // namespace tgsn
