#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tgsn/train.hpp"

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

Prediction pred(int label, int predicted, std::vector<double> probs, double mt = 0, double mp = 0) {
  Prediction p;
  p.label = label;
  p.predicted = predicted;
  p.probs = std::move(probs);
  p.mmse_true = mt;
  p.mmse_pred = mp;
  return p;
}

std::vector<FeatureTensor> tiny_corpus(int per_class = 5) {
  SynthConfig sc;
  sc.subjects_per_class = {per_class, per_class, per_class};
  sc.duration_s = 4;
  sc.channels = default_channel_names(3);
  std::vector<FeatureTensor> out;
  for (const auto& r : synthesize_dataset(sc)) out.push_back(extract_features(r, FeatureConfig{}));
  return out;
}

ExperimentConfig tiny_experiment() {
  auto c = desk_profile();
  c.model.gsa.width = 4;
  c.model.gsa.blocks = 1;
  c.model.gsa.ffn_expansion = 1;
  c.train.epochs = 4;
  c.train.patience = 2;
  c.train.batch_size = 4;
  c.use_ptda = false;
  return c;
}

}  // namespace

TEST(TaskWeights, FirstEpochAndEqualRatios) {
  LossWeightConfig cfg;
  EXPECT_EQ(update_task_weights({}, {}, cfg, 1), (std::vector<double>{1.0, 1.0}));
  auto w = update_task_weights({2.0, 8.0}, {1.0, 4.0}, cfg, 2);
  EXPECT_NEAR(w[0], 1.0, 1e-15);
  EXPECT_NEAR(w[1], 1.0, 1e-15);
}

TEST(TaskWeights, ScalarOracle) {
  // N * exp(w_i / xi) / sum_j exp(w_j / xi) in long double.
  const long double e1 = std::exp(1.0L / 5), e2 = std::exp(0.5L / 5);
  const double ce = static_cast<double>(2 * e1 / (e1 + e2)), ms = static_cast<double>(2 * e2 / (e1 + e2));
  auto w = update_task_weights({1.0, 1.0}, {1.0, 0.5}, LossWeightConfig{}, 2);
  EXPECT_NEAR(w[0], ce, 1e-12);
  EXPECT_NEAR(w[1], ms, 1e-12);
  EXPECT_NEAR(w[0], 1.050, 5e-4);
  EXPECT_NEAR(w[1], 0.950, 5e-4);
}

TEST(TaskWeights, SumSymmetryAndTemperature) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> prev{0.1 + uniform01(rng), 0.1 + uniform01(rng)};
    std::vector<double> curr{0.1 + uniform01(rng), 0.1 + uniform01(rng)};
    auto w = update_task_weights(prev, curr, LossWeightConfig{}, 3);
    EXPECT_NEAR(w[0] + w[1], 2.0, 1e-9);
    EXPECT_GT(w[0], 0.0);
    EXPECT_GT(w[1], 0.0);
    auto s = update_task_weights({prev[1], prev[0]}, {curr[1], curr[0]}, LossWeightConfig{}, 3);
    EXPECT_NEAR(s[0], w[1], 1e-12);
    EXPECT_NEAR(s[1], w[0], 1e-12);
  }
  double last = 10;
  for (double xi = 0.5; xi <= 50; xi *= 1.5) {
    auto w = update_task_weights({1.0, 1.0}, {1.0, 0.5}, LossWeightConfig{2, xi}, 2);
    const double gap = std::abs(w[0] - 1.0);
    EXPECT_LT(gap, last);
    last = gap;
  }
}

TEST(TaskWeights, Errors) {
  EXPECT_EQ(code_of([] { update_task_weights({0.0, 1.0}, {1.0, 1.0}, LossWeightConfig{}, 2); }),
            ErrorCode::DegenerateLossRatio);
  EXPECT_EQ(code_of([] { update_task_weights({-1.0, 1.0}, {1.0, 1.0}, LossWeightConfig{}, 2); }),
            ErrorCode::DegenerateLossRatio);
  EXPECT_EQ(code_of([] { update_task_weights({1.0, 1.0}, {1.0, 1.0}, LossWeightConfig{2, 0.0}, 2); }),
            ErrorCode::InvalidConfig);
}

TEST(TaskWeights, StateUsesTwoMostRecentEpochs) {
  TaskWeightState st;
  EXPECT_EQ(st.next_weights(), (std::vector<double>{1.0, 1.0}));
  st.record({1.0, 1.0});
  EXPECT_EQ(st.next_weights(), (std::vector<double>{1.0, 1.0}));
  st.record({1.0, 0.5});
  auto w = st.next_weights();
  EXPECT_NEAR(w[0], 1.050, 5e-4);
}

TEST(TotalLoss, ArithmeticAndLimits) {
  using TF = ad::Tensor<double>;
  auto uniform = TF::zeros({4, 3});
  auto mm = TF::from({4, 1}, {20, 21, 22, 23});
  auto l = total_loss<double>(uniform, {0, 1, 2, 1}, mm, {20, 21, 22, 23}, {1.0, 1.0});
  EXPECT_NEAR(l.ce.item(), std::log(3.0), 1e-12);
  EXPECT_NEAR(l.mse.item(), 0.0, 1e-15);
  auto sure = TF::from({2, 3}, {60, 0, 0, 0, 0, 60});
  auto p = total_loss<double>(sure, {0, 2}, TF::from({2, 1}, {10, 12}), {10, 12}, {1.0, 1.0});
  EXPECT_LT(p.total.item(), 1e-20);
  auto m = total_loss<double>(uniform, {0, 1, 2, 1}, mm, {19, 21, 22, 23}, {0.5, 1.5});
  EXPECT_NEAR(m.total.item(), 0.5 * std::log(3.0) + 1.5 * 0.25, 1e-12);
  EXPECT_EQ(code_of([&] { total_loss<double>(uniform, {0, 1, 3, 1}, mm, {1, 1, 1, 1}, {1, 1}); }),
            ErrorCode::ClassOutOfRange);
}

TEST(TotalLoss, UnscoredRowsStayOutOfTheRegressionTerm) {
  using TF = ad::Tensor<double>;
  auto logits = TF::zeros({3, 2});
  auto mm = TF::from({3, 1}, {20, 25, 22}, true);
  const std::vector<unsigned char> scored{1, 0, 1};
  auto l = total_loss<double>(logits, {0, 1, 0}, mm, {21, 0, 24}, {1.0, 1.0}, &scored);
  EXPECT_NEAR(l.mse.item(), (1.0 + 4.0) / 2, 1e-12);
  ad::backward(l.total);
  EXPECT_EQ(mm.grad()[1], 0.0);
  EXPECT_NEAR(mm.grad()[0], 2.0 * (20 - 21) / 2, 1e-12);
  const std::vector<unsigned char> none(3, 0);
  EXPECT_EQ(total_loss<double>(logits, {0, 1, 0}, mm, {21, 0, 24}, {1.0, 1.0}, &none).mse.item(), 0.0);
}

TEST(Metrics, PerfectPredictions) {
  std::vector<Prediction> ps;
  for (int i = 0; i < 9; ++i) {
    std::vector<double> pr(3, 0.0);
    pr[static_cast<std::size_t>(i % 3)] = 1.0;
    ps.push_back(pred(i % 3, i % 3, pr, 20.0 + i, 20.0 + i));
  }
  auto m = compute_metrics(ps, 3);
  EXPECT_EQ(m.acc, 100.0);
  EXPECT_EQ(m.auc, 100.0);
  EXPECT_EQ(m.sen, 100.0);
  EXPECT_EQ(m.spe, 100.0);
  EXPECT_EQ(m.rmse, 0.0);
}

TEST(Metrics, HandBuiltConfusion) {
  std::vector<Prediction> ps{pred(1, 1, {0.2, 0.8}), pred(1, 0, {0.8, 0.2}),
                             pred(0, 0, {0.9, 0.1}), pred(0, 0, {0.7, 0.3})};
  auto m = compute_metrics(ps, 2);
  EXPECT_DOUBLE_EQ(m.sen, 50.0);
  EXPECT_DOUBLE_EQ(m.spe, 100.0);
  EXPECT_DOUBLE_EQ(m.acc, 75.0);
  EXPECT_DOUBLE_EQ(m.auc, 75.0);
}

TEST(Metrics, RandomScoresGiveChanceAuc) {
  Rng rng(3);
  std::vector<double> s(1000);
  std::vector<bool> pos(1000);
  for (std::size_t i = 0; i < 1000; ++i) {
    s[i] = uniform01(rng);
    pos[i] = i % 2 == 0;
  }
  EXPECT_NEAR(100.0 * auc_binary(s, pos), 50.0, 3.0);
  // Permutation oracle: the AUC of shuffled labels spreads around 50.
  std::vector<double> perm;
  for (int r = 0; r < 200; ++r) {
    std::shuffle(pos.begin(), pos.end(), rng);
    perm.push_back(100.0 * auc_binary(s, pos));
  }
  const double mean = std::accumulate(perm.begin(), perm.end(), 0.0) / 200.0;
  EXPECT_NEAR(mean, 50.0, 0.5);
}

TEST(Metrics, TiesShareRanksAndSingleClassIsUndefined) {
  EXPECT_DOUBLE_EQ(auc_binary({0.5, 0.5, 0.5, 0.5}, {true, false, true, false}), 0.5);
  EXPECT_DOUBLE_EQ(auc_binary({0.1, 0.5, 0.5, 0.9}, {false, true, false, true}), 0.875);
  std::vector<Prediction> one{pred(0, 0, {1, 0}), pred(0, 1, {0, 1})};
  EXPECT_EQ(code_of([&] { compute_metrics(one, 2); }), ErrorCode::UndefinedAuc);
  std::vector<Prediction> bad{pred(0, 0, {1, 0}), pred(2, 1, {0, 1})};
  EXPECT_EQ(code_of([&] { compute_metrics(bad, 2); }), ErrorCode::ClassOutOfRange);
}

TEST(Metrics, AggregateMeanAndSampleSd) {
  Metrics a;
  a.acc = 80;
  a.rmse = 2;
  auto same = aggregate({a, a, a});
  EXPECT_EQ(same.mean.acc, 80.0);
  EXPECT_EQ(same.sd.acc, 0.0);
  Metrics b = a;
  b.acc = 90;
  auto two = aggregate({a, b});
  EXPECT_DOUBLE_EQ(two.mean.acc, 85.0);
  EXPECT_NEAR(two.sd.acc, std::sqrt(50.0), 1e-12);
  EXPECT_EQ(format_pm(85.0, 7.0710678), "85.00 ± 7.07");
}

TEST(Config, ProfilesAndJsonValidation) {
  auto desk = desk_profile();
  EXPECT_EQ(desk.ptda.steps, 50u);
  EXPECT_EQ(full_profile().ptda.steps, 1000u);
  EXPECT_EQ(full_profile().train.epochs, 500u);
  EXPECT_EQ(full_profile().train.patience, 100u);
  EXPECT_DOUBLE_EQ(full_profile().train.lr, 1e-5);
  auto c = experiment_from_json(nlohmann::json::parse(R"({"train":{"epochs":7},"ptda":{"ratio":1.0}})"), desk);
  EXPECT_EQ(c.train.epochs, 7u);
  EXPECT_EQ(c.ptda.ratio, 1.0);
  auto round = experiment_from_json(to_json(c), desk_profile());
  EXPECT_EQ(to_json(round), to_json(c));
  EXPECT_EQ(code_of([&] { experiment_from_json(nlohmann::json::parse(R"({"folds":1})"), desk); }),
            ErrorCode::InvalidConfig);
  EXPECT_EQ(code_of([&] { experiment_from_json(nlohmann::json::parse(R"({"train":{"lr":"x"}})"), desk); }),
            ErrorCode::InvalidConfig);
}

TEST(Hygiene, LedgerFlagsGeneratedAndTestSubjects) {
  FeatureTensor a, b;
  a.subject_id = "S1";
  b.subject_id = "GEN-0-0";
  b.origin = Origin::Generated;
  HygieneLedger book;
  std::vector<const FeatureTensor*> ok{&a};
  book.record(kPathNormalization, ok);
  EXPECT_TRUE(book.violations({"S2"}).empty());
  EXPECT_EQ(book.violations({"S1"}).size(), 1u);
  std::vector<const FeatureTensor*> bad{&b};
  book.record(kPathModelSelection, bad);
  EXPECT_EQ(book.violations({"S2"}).size(), 1u);
}

TEST(TrainFold, DeterministicAuditedAndEarlyStopped) {
  auto corpus = tiny_corpus();
  auto cfg = tiny_experiment();
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (const auto& t : corpus) {
    ids.push_back(t.subject_id);
    labels.push_back(t.class_label);
  }
  auto split = make_folds(ids, labels, 5, 1)[0];
  HygieneLedger book;
  auto a = train_fold(corpus, split, cfg, 7, nullptr, &book);
  auto b = train_fold(corpus, split, cfg, 7);
  EXPECT_EQ(a.metrics.acc, b.metrics.acc);
  EXPECT_EQ(a.metrics.rmse, b.metrics.rmse);
  EXPECT_TRUE(a.violations.empty());
  for (const char* path : {kPathNormalization, kPathModelSelection}) {
    ASSERT_TRUE(book.uses().count(path)) << path;
    for (const auto& e : book.uses().at(path))
      EXPECT_EQ(std::count(split.test.begin(), split.test.end(), e.subject_id), 0);
  }
  double best = 1e300;
  for (const auto& e : a.epochs) {
    EXPECT_NEAR(e.lambda_ce + e.lambda_mse, 2.0, 1e-9);
    best = std::min(best, e.val_loss);
  }
  ASSERT_GE(a.best_epoch, 1u);
  EXPECT_EQ(a.epochs[a.best_epoch - 1].val_loss, best);
  EXPECT_EQ(a.predictions.size(), split.test.size());
  auto empty = split;
  empty.test.clear();
  EXPECT_EQ(code_of([&] { train_fold(corpus, empty, cfg, 7); }), ErrorCode::EmptySplit);
}

TEST(TrainFold, GeneratedSamplesNeverEvaluated) {
  auto corpus = tiny_corpus();
  auto cfg = tiny_experiment();
  cfg.use_ptda = true;
  cfg.ptda.hidden = 8;
  cfg.ptda.pretrain_iterations = 10;
  cfg.ptda.finetune_iterations = 5;
  cfg.ptda.ratio = 1.0;
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (const auto& t : corpus) {
    ids.push_back(t.subject_id);
    labels.push_back(t.class_label);
  }
  auto split = make_folds(ids, labels, 5, 2)[1];
  HygieneLedger book;
  auto r = train_fold(corpus, split, cfg, 3, nullptr, &book);
  EXPECT_EQ(r.train_generated, r.train_real);
  EXPECT_TRUE(r.violations.empty());
  for (const auto& p : r.predictions) EXPECT_EQ(p.subject_id.rfind("GEN-", 0), std::string::npos);
  auto tainted = corpus;
  tainted[0].origin = Origin::Generated;
  auto s2 = split;
  s2.val.push_back(tainted[0].subject_id);
  EXPECT_EQ(code_of([&] { train_fold(tainted, s2, cfg, 3); }), ErrorCode::FoldError);
}

TEST(RunCv, FifteenRunsForFiveFoldsThreeSeeds) {
  auto corpus = tiny_corpus();
  auto cfg = tiny_experiment();
  cfg.train.epochs = 2;
  cfg.seeds = {1, 2, 3};
  auto res = run_cv(corpus, {}, cfg, 1);
  EXPECT_EQ(res.runs.size(), 15u);
  EXPECT_EQ(res.summary.runs, 15u);
  EXPECT_TRUE(res.violations.empty());
  std::ostringstream os;
  write_results_csv(os, "3class", res.runs);
  const std::string csv = os.str();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 16);
  EXPECT_EQ(csv.substr(0, 36), "task,fold,seed,acc,auc,sen,spe,rmse\n");
  auto again = run_cv(corpus, {}, cfg, 2);
  std::ostringstream os2;
  write_results_csv(os2, "3class", again.runs);
  EXPECT_EQ(csv, os2.str());
}

TEST(RunCv, ClassSubsetRelabels) {
  auto corpus = tiny_corpus();
  auto two = select_classes(corpus, {2, 0});
  EXPECT_EQ(two.size(), 10u);
  for (const auto& t : two) EXPECT_TRUE(t.class_label == 0 || t.class_label == 1);
  EXPECT_EQ(count_classes(two), 2u);
  EXPECT_EQ(code_of([&] { select_classes(corpus, {1, 1}); }), ErrorCode::InvalidConfig);
}
