#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tgsn/analysis.hpp"
#include "tgsn/data_model.hpp"
#include "tgsn/diffusion.hpp"
#include "tgsn/features.hpp"
#include "tgsn/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tgsn;

namespace {

// ---------------------------------------------------------------------------
// Synthetic-corpus config <-> JSON

json to_json(const SynthConfig& c) {
  return {{"class_names", c.class_names},
          {"subjects_per_class", c.subjects_per_class},
          {"fs", c.fs},
          {"duration_s", c.duration_s},
          {"channels", c.channels},
          {"base_gains", c.base_gains},
          {"class_gains", c.class_gains},
          {"signature_channels", c.signature_channels},
          {"components_per_band", c.components_per_band},
          {"gain_jitter_sd", c.gain_jitter_sd},
          {"strength_spread", c.strength_spread},
          {"noise_sd", c.noise_sd},
          {"mmse_link",
           {{"intercept", c.mmse_link.intercept},
            {"slope", c.mmse_link.slope},
            {"class_severity", c.mmse_link.class_severity},
            {"noise_sd", c.mmse_link.noise_sd}}},
          {"subject_prefix", c.subject_prefix},
          {"seed", c.seed}};
}

SynthConfig synth_from_json(const json& j, SynthConfig c) {
  try {
    c.class_names = j.value("class_names", c.class_names);
    c.subjects_per_class = j.value("subjects_per_class", c.subjects_per_class);
    c.fs = j.value("fs", c.fs);
    c.duration_s = j.value("duration_s", c.duration_s);
    c.channels = j.value("channels", c.channels);
    c.base_gains = j.value("base_gains", c.base_gains);
    c.class_gains = j.value("class_gains", c.class_gains);
    c.signature_channels = j.value("signature_channels", c.signature_channels);
    c.components_per_band = j.value("components_per_band", c.components_per_band);
    c.gain_jitter_sd = j.value("gain_jitter_sd", c.gain_jitter_sd);
    c.strength_spread = j.value("strength_spread", c.strength_spread);
    c.noise_sd = j.value("noise_sd", c.noise_sd);
    if (j.contains("mmse_link")) {
      const auto& m = j.at("mmse_link");
      c.mmse_link.intercept = m.value("intercept", c.mmse_link.intercept);
      c.mmse_link.slope = m.value("slope", c.mmse_link.slope);
      c.mmse_link.class_severity = m.value("class_severity", c.mmse_link.class_severity);
      c.mmse_link.noise_sd = m.value("noise_sd", c.mmse_link.noise_sd);
    }
    c.subject_prefix = j.value("subject_prefix", c.subject_prefix);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("synth config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Options shared by the subcommands

struct Options {
  std::string config;
  std::string out;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::optional<std::size_t> diffusion_steps;
  std::optional<double> aug_ratio;
  std::string pretrain_corpus;
  std::string features;
  std::string input;
  std::string checkpoint;
  std::string denoiser;
  std::optional<std::size_t> epochs, folds, blocks;
  std::vector<int> classes;
  bool no_ptda = false, no_gsa = false, no_tgq = false;
  // synth
  std::vector<int> per_class, signature_channels;
  std::optional<std::size_t> channels;
  std::optional<double> duration, jitter, noise;
  // sweep / mmd
  std::vector<std::size_t> ks;
  std::string set_a, set_b, origin_a, origin_b;
  std::optional<int> class_a, class_b;
  std::optional<double> bandwidth;
  bool unbiased = false;
};

json load_config(const Options& o) {
  if (o.config.empty()) return json::object();
  if (!fs::exists(o.config)) fail(ErrorCode::InvalidConfig, "config file not found: " + o.config);
  try {
    auto j = json::parse(io::read_text(o.config));
    if (!j.is_object()) fail(ErrorCode::InvalidConfig, "config must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, "config " + o.config + ": " + e.what());
  }
}

// Flag value, else config value, else fallback; stored as an absolute path.
std::string resolve_path(const std::string& flag, const json& j, const char* key,
                         const std::string& fallback = {}) {
  std::string v = !flag.empty() ? flag : j.value(key, fallback);
  if (v.empty()) return v;
  return fs::absolute(v).lexically_normal().string();
}

std::string require_path(const std::string& flag, const json& j, const char* key,
                         const char* what) {
  auto p = resolve_path(flag, j, key);
  if (p.empty()) fail(ErrorCode::InvalidConfig, std::string("missing ") + what);
  if (!fs::exists(p)) fail(ErrorCode::IoError, std::string(what) + " not found: " + p);
  return p;
}

fs::path run_dir(const Options& o, const json& j, const std::string& command) {
  std::string out = !o.out.empty() ? o.out : j.value("out", std::string());
  if (out.empty()) out = "runs/" + command;
  fs::path p(out);
  if (p.is_relative())
    if (const char* root = std::getenv("TGSN_RUN_DIR"); root && *root) p = fs::path(root) / p;
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create run directory " + p.string() + ": " + ec.message());
  return p;
}

ExperimentConfig experiment(const Options& o, const json& j) {
  const auto profile = !o.profile.empty() ? o.profile : j.value("profile", std::string("desk"));
  ExperimentConfig c;
  if (profile == "desk") c = desk_profile();
  else if (profile == "full") c = full_profile();
  else fail(ErrorCode::InvalidConfig, "unknown profile '" + profile + "'");
  c = experiment_from_json(j, c);
  if (o.seed) c.seeds = {*o.seed};
  if (o.diffusion_steps) c.ptda.steps = *o.diffusion_steps;
  if (o.aug_ratio) {
    if (*o.aug_ratio < 0) fail(ErrorCode::InvalidConfig, "--aug-ratio must be >= 0");
    c.ptda.ratio = *o.aug_ratio;
  }
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.folds) c.folds = *o.folds;
  if (o.blocks) c.model.gsa.blocks = *o.blocks;
  if (!o.classes.empty()) c.classes = o.classes;
  if (o.no_ptda) c.use_ptda = false;
  if (o.no_gsa) c.model.use_gsa = false;
  if (o.no_tgq) c.model.use_tgq = false;
  if (c.folds < 2) fail(ErrorCode::InvalidConfig, "folds must be at least 2");
  validate(c.model.gsa);
  c.ptda.schedule();
  return c;
}

json echo(const std::string& command, const std::string& profile, const ExperimentConfig& c) {
  auto j = to_json(c);
  j["command"] = command;
  j["profile"] = profile;
  return j;
}

std::string profile_of(const Options& o, const json& j) {
  return !o.profile.empty() ? o.profile : j.value("profile", std::string("desk"));
}

void write_json(const fs::path& p, const json& j) { io::write_text(p, j.dump(2) + "\n"); }

template <class F>
void write_file(const fs::path& p, F&& body) {
  auto os = io::open_out(p, false);
  body(os);
  if (!os) fail(ErrorCode::IoError, "failed writing " + p.string());
}

std::vector<fs::path> list_files(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) fail(ErrorCode::IoError, "not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) fail(ErrorCode::EmptySplit, "no " + ext + " files in " + dir.string());
  return out;
}

std::vector<FeatureTensor> load_corpus(const fs::path& dir) {
  std::vector<FeatureTensor> out;
  for (const auto& p : list_files(dir, ".feat")) out.push_back(load_features(p));
  return out;
}

std::vector<FeatureTensor> load_pretrain(const std::string& dir) {
  if (dir.empty()) return {};
  auto v = load_corpus(dir);
  for (auto& t : v) t.origin = Origin::Pretrain;
  return v;
}

std::string safe_name(std::string s) {
  for (auto& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_' && ch != '.') ch = '_';
  return s;
}

void log_line(const std::string& s) {
  static std::mutex mu;
  std::lock_guard lk(mu);
  std::cerr << s << '\n';
}

// Results, epoch log with per-epoch lambdas, predictions, summary and checkpoints.
void write_cv_outputs(const fs::path& dir, const std::string& task, const CvResult& cv,
                      bool checkpoints) {
  write_file(dir / "results.csv", [&](auto& os) { write_results_csv(os, task, cv.runs); });
  write_file(dir / "epochs.csv", [&](auto& os) { write_epoch_log_csv(os, cv.runs); });
  write_file(dir / "predictions.csv", [&](auto& os) { write_predictions_csv(os, cv.runs); });
  auto s = summary_json(cv.summary);
  s["task"] = task;
  s["table"] = {{"acc", format_pm(cv.summary.mean.acc, cv.summary.sd.acc)},
                {"auc", format_pm(cv.summary.mean.auc, cv.summary.sd.auc)},
                {"sen", format_pm(cv.summary.mean.sen, cv.summary.sd.sen)},
                {"spe", format_pm(cv.summary.mean.spe, cv.summary.sd.spe)},
                {"rmse", format_pm(cv.summary.mean.rmse, cv.summary.sd.rmse)}};
  write_json(dir / "summary.json", s);
  write_json(dir / "hygiene.json", {{"violations", cv.violations}});
  std::ostringstream log;
  for (const auto& r : cv.runs) {
    log << "seed " << r.seed << " fold " << r.fold << " train_real " << r.train_real
        << " train_generated " << r.train_generated << " best_epoch " << r.best_epoch << '\n';
    for (const auto& e : r.epochs)
      log << "seed " << r.seed << " fold " << r.fold << " epoch " << e.epoch << " lambda_ce "
          << io::fmt9(e.lambda_ce) << " lambda_mse " << io::fmt9(e.lambda_mse) << " train_ce "
          << io::fmt9(e.train_ce) << " train_mse " << io::fmt9(e.train_mse) << " val_loss "
          << io::fmt9(e.val_loss) << '\n';
  }
  io::write_text(dir / "run.log", log.str());
  if (checkpoints) {
    fs::create_directories(dir / "checkpoints");
    for (const auto& r : cv.runs)
      write_checkpoint(dir / "checkpoints" /
                           ("seed" + std::to_string(r.seed) + "_fold" + std::to_string(r.fold) + ".ckpt"),
                       r.checkpoint);
  }
  if (!cv.violations.empty()) fail(ErrorCode::FoldError, "hygiene audit: " + cv.violations.front());
}

void print_summary(const std::string& label, const Aggregate& a) {
  std::cout << label << " runs=" << a.runs << " acc=" << format_pm(a.mean.acc, a.sd.acc)
            << " auc=" << format_pm(a.mean.auc, a.sd.auc) << " sen=" << format_pm(a.mean.sen, a.sd.sen)
            << " spe=" << format_pm(a.mean.spe, a.sd.spe)
            << " rmse=" << format_pm(a.mean.rmse, a.sd.rmse) << '\n';
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_synth(const Options& o) {
  const auto j = load_config(o);
  auto c = synth_from_json(j.value("synth", json::object()), SynthConfig{});
  if (!o.per_class.empty()) {
    c.subjects_per_class = o.per_class;
    if (c.subjects_per_class.size() == 1)
      c.subjects_per_class.assign(c.class_names.size(), o.per_class.front());
  }
  if (o.seed) c.seed = *o.seed;
  if (o.channels) c.channels = default_channel_names(*o.channels);
  if (!o.signature_channels.empty()) c.signature_channels = o.signature_channels;
  if (o.duration) c.duration_s = *o.duration;
  if (o.jitter) c.gain_jitter_sd = *o.jitter;
  if (o.noise) c.noise_sd = *o.noise;
  const auto dir = run_dir(o, j, "synth");
  auto recs = synthesize_dataset(c);
  std::ostringstream idx;
  idx << "subject_id,class,mmse\n";
  for (const auto& r : recs) {
    write_recording(dir / (safe_name(r.subject_id) + ".rec"), r);
    idx << r.subject_id << ',' << r.class_label << ',' << io::fmt9(r.mmse) << '\n';
  }
  io::write_text(dir / "subjects.csv", idx.str());
  write_json(dir / "config.json", {{"command", "synth"}, {"synth", to_json(c)}});
  std::cout << "synth: " << recs.size() << " recordings -> " << dir.string() << '\n';
}

void cmd_extract(const Options& o) {
  const auto j = load_config(o);
  const auto in = require_path(o.input, j, "input", "--input recordings directory");
  const auto dir = run_dir(o, j, "extract");
  FeatureConfig fc;
  std::ostringstream dropped;
  std::size_t n = 0;
  for (const auto& p : list_files(in, ".rec")) {
    auto rec = load_recording(p);
    auto t = extract_features(rec, fc, [&](const std::string& m) { dropped << m << '\n'; });
    write_features(dir / (safe_name(t.subject_id) + ".feat"), t);
    ++n;
  }
  io::write_text(dir / "dropped.log", dropped.str());
  write_json(dir / "config.json", {{"command", "extract"}, {"input", in}});
  std::cout << "extract: " << n << " feature tensors -> " << dir.string() << '\n';
}

void cmd_pretrain(const Options& o) {
  const auto j = load_config(o);
  auto cfg = experiment(o, j);
  const auto features = resolve_path(o.features, j, "features");
  const auto pretrain = resolve_path(o.pretrain_corpus, j, "pretrain_corpus");
  const auto src = !pretrain.empty() ? pretrain : features;
  if (src.empty()) fail(ErrorCode::InvalidConfig, "missing --pretrain-corpus or --features");
  auto corpus = load_corpus(src);
  crop_to_common_epochs(corpus);
  const auto dir = run_dir(o, j, "pretrain-diffusion");
  const auto stats = compute_feature_stats(pointers(corpus));
  std::vector<std::vector<float>> rows;
  for (const auto& t : corpus) rows.push_back(normalize(t, stats).values);
  const auto seed = cfg.seeds.front();
  const auto sch = cfg.ptda.schedule();
  Denoiser<float> net(DenoiserConfig{rows.front().size(), cfg.ptda.hidden, cfg.ptda.steps,
                                     derive_seed(seed, {0x707265ULL})},
                      &sch);
  auto log = train_denoiser(net, sch, rows,
                            DenoiserTrainConfig{cfg.ptda.pretrain_iterations, cfg.ptda.batch_size,
                                                cfg.ptda.lr, derive_seed(seed, {1})});
  write_checkpoint(dir / "denoiser.ckpt",
                   denoiser_checkpoint(net, {{"num_epochs", corpus.front().num_epochs},
                                             {"ptda", to_json(cfg.ptda)}}));
  write_file(dir / "losses.csv", [&](auto& os) {
    os << "iteration,loss\n";
    for (std::size_t i = 0; i < log.losses.size(); ++i) os << i + 1 << ',' << io::fmt9(log.losses[i]) << '\n';
  });
  auto e = echo("pretrain-diffusion", profile_of(o, j), cfg);
  e["features"] = features;
  e["pretrain_corpus"] = pretrain;
  write_json(dir / "config.json", e);
  std::cout << "pretrain-diffusion: " << rows.size() << " rows, final loss "
            << io::fmt9(log.losses.empty() ? 0.0 : log.losses.back()) << " -> " << dir.string() << '\n';
}

void cmd_augment(const Options& o) {
  const auto j = load_config(o);
  auto cfg = experiment(o, j);
  const auto features = require_path(o.features, j, "features", "--features directory");
  const auto den_path = resolve_path(o.denoiser, j, "denoiser");
  auto real = select_classes(load_corpus(features), cfg.classes);
  crop_to_common_epochs(real);
  const auto dir = run_dir(o, j, "augment");
  const auto seed = cfg.seeds.front();
  const auto stats = compute_feature_stats(pointers(real));
  std::vector<FeatureTensor> norm;
  for (const auto& t : real) norm.push_back(normalize(t, stats));

  std::optional<Denoiser<float>> base;
  if (!den_path.empty()) {
    if (!fs::exists(den_path)) fail(ErrorCode::IoError, "denoiser checkpoint not found: " + den_path);
    base.emplace(denoiser_from_checkpoint(load_checkpoint(den_path)));
    if (base->config().steps != cfg.ptda.steps)
      fail(ErrorCode::InvalidConfig, "denoiser was trained with " +
                                         std::to_string(base->config().steps) + " diffusion steps, config asks for " +
                                         std::to_string(cfg.ptda.steps));
  } else {
    base.emplace(pretrain_denoiser(flatten_rows(pointers(norm)), cfg.ptda, derive_seed(seed, {0x707265ULL})));
  }
  std::map<int, std::vector<const FeatureTensor*>> by_class;
  for (const auto& t : norm) by_class[t.class_label].push_back(&t);
  std::vector<Denoiser<float>> tuned;
  tuned.reserve(by_class.size());
  std::map<int, const Denoiser<float>*> nets;
  for (const auto& [cls, members] : by_class)
    tuned.push_back(finetune_denoiser(*base, flatten_rows(members), cfg.ptda,
                                      derive_seed(seed, {0x6674ULL, static_cast<std::uint64_t>(cls)})));
  std::size_t i = 0;
  for (const auto& [cls, members] : by_class) nets[cls] = &tuned[i++];
  auto gen = generate_for_classes(pointers(norm), nets, cfg.ptda, cfg.ptda.ratio,
                                  derive_seed(seed, {0x67656eULL}));

  std::vector<FeatureTensor> all = real;
  json mmds = json::object();
  for (auto& g : gen) all.push_back(denormalize(g, stats));
  for (const auto& [cls, members] : by_class) {
    std::vector<const FeatureTensor*> g;
    for (const auto& t : gen)
      if (t.class_label == cls) g.push_back(&t);
    if (g.size() >= 2 && members.size() >= 2)
      mmds[std::to_string(cls)] = mmd(to_matrix(members), to_matrix(g)).value;
  }
  for (const auto& t : all) write_features(dir / (safe_name(t.subject_id) + ".feat"), t);
  write_file(dir / "embedding.csv", [&](auto& os) { export_embedding_matrix(os, all); });
  write_json(dir / "summary.json", {{"real", real.size()}, {"generated", gen.size()}, {"mmd_by_class", mmds}});
  auto e = echo("augment", profile_of(o, j), cfg);
  e["features"] = features;
  e["denoiser"] = den_path;
  write_json(dir / "config.json", e);
  std::cout << "augment: " << real.size() << " real + " << gen.size() << " generated -> "
            << dir.string() << '\n';
}

void cmd_train(const Options& o) {
  const auto j = load_config(o);
  auto cfg = experiment(o, j);
  const auto features = require_path(o.features, j, "features", "--features directory");
  const auto pretrain = resolve_path(o.pretrain_corpus, j, "pretrain_corpus");
  auto corpus = load_corpus(features);
  const auto dir = run_dir(o, j, "train");
  auto e = echo("train", profile_of(o, j), cfg);
  e["features"] = features;
  e["pretrain_corpus"] = pretrain;
  write_json(dir / "config.json", e);
  auto cv = run_cv(corpus, load_pretrain(pretrain), cfg, o.jobs);
  for (const auto& r : cv.runs)
    for (const auto& ep : r.epochs)
      log_line("seed " + std::to_string(r.seed) + " fold " + std::to_string(r.fold) + " epoch " +
               std::to_string(ep.epoch) + " lambda_ce " + io::fmt9(ep.lambda_ce) + " lambda_mse " +
               io::fmt9(ep.lambda_mse) + " val_loss " + io::fmt9(ep.val_loss));
  write_cv_outputs(dir, cfg.task, cv, true);
  print_summary("train " + cfg.task, cv.summary);
}

void cmd_evaluate(const Options& o) {
  const auto j = load_config(o);
  const auto ckpt = require_path(o.checkpoint, j, "checkpoint", "--checkpoint file");
  const auto features = require_path(o.features, j, "features", "--features directory");
  std::vector<int> classes = !o.classes.empty() ? o.classes : j.value("classes", std::vector<int>{});
  auto lm = model_from_checkpoint(load_checkpoint(ckpt));
  auto corpus = select_classes(load_corpus(features), classes);
  const auto& mc = lm.model->config();
  std::vector<FeatureTensor> norm;
  for (auto& t : corpus) {
    if (t.num_epochs < mc.num_epochs) fail(ErrorCode::ShapeMismatch, t.subject_id + " has too few epochs");
    crop_epochs(t, mc.num_epochs);
    norm.push_back(normalize(t, lm.stats));
  }
  const auto dir = run_dir(o, j, "evaluate");
  auto out = evaluate_model(*lm.model, pointers(norm));
  FoldResult r;
  r.predictions = out.predictions;
  r.metrics = compute_metrics(out.predictions, mc.num_classes);
  write_file(dir / "results.csv", [&](auto& os) { write_results_csv(os, "evaluate", {r}); });
  write_file(dir / "predictions.csv", [&](auto& os) { write_predictions_csv(os, {r}); });
  write_json(dir / "config.json",
             {{"command", "evaluate"}, {"checkpoint", ckpt}, {"features", features}, {"classes", classes}});
  print_summary("evaluate", aggregate({r.metrics}));
}

void cmd_ablate(const Options& o) {
  const auto j = load_config(o);
  auto cfg = experiment(o, j);
  const auto features = require_path(o.features, j, "features", "--features directory");
  const auto pretrain = resolve_path(o.pretrain_corpus, j, "pretrain_corpus");
  auto corpus = load_corpus(features);
  auto pre = load_pretrain(pretrain);
  const auto dir = run_dir(o, j, "ablate");
  auto e = echo("ablate", profile_of(o, j), cfg);
  e["features"] = features;
  e["pretrain_corpus"] = pretrain;
  write_json(dir / "config.json", e);
  std::ostringstream grid, results;
  grid << "use_ptda,use_gsa,use_tgq,runs,acc_mean,acc_sd,auc_mean,auc_sd,sen_mean,sen_sd,spe_mean,spe_sd,rmse_mean,rmse_sd\n";
  results << "task,fold,seed,acc,auc,sen,spe,rmse\n";
  for (int ptda : {1, 0})
    for (int gsa : {1, 0})
      for (int tgq : {1, 0}) {
        auto c = cfg;
        c.use_ptda = ptda;
        c.model.use_gsa = gsa;
        c.model.use_tgq = tgq;
        auto cv = run_cv(corpus, pre, c, o.jobs);
        if (!cv.violations.empty()) fail(ErrorCode::FoldError, "hygiene audit: " + cv.violations.front());
        const auto& a = cv.summary;
        grid << ptda << ',' << gsa << ',' << tgq << ',' << a.runs;
        for (auto [m, s] : {std::pair{a.mean.acc, a.sd.acc}, {a.mean.auc, a.sd.auc},
                            {a.mean.sen, a.sd.sen}, {a.mean.spe, a.sd.spe}, {a.mean.rmse, a.sd.rmse}})
          grid << ',' << io::fmt9(m) << ',' << io::fmt9(s);
        grid << '\n';
        const auto label = cfg.task + "[ptda=" + std::to_string(ptda) + ";gsa=" + std::to_string(gsa) +
                           ";tgq=" + std::to_string(tgq) + "]";
        std::ostringstream part;
        write_results_csv(part, label, cv.runs);
        auto text = part.str();
        results << text.substr(text.find('\n') + 1);
        print_summary(label, a);
      }
  io::write_text(dir / "ablation.csv", grid.str());
  io::write_text(dir / "results.csv", results.str());
}

void cmd_sweep(const Options& o) {
  const auto j = load_config(o);
  auto cfg = experiment(o, j);
  const auto features = require_path(o.features, j, "features", "--features directory");
  const auto pretrain = resolve_path(o.pretrain_corpus, j, "pretrain_corpus");
  auto ks = !o.ks.empty() ? o.ks : j.value("ks", std::vector<std::size_t>{1, 2, 3, 4, 5});
  auto corpus = load_corpus(features);
  const auto dir = run_dir(o, j, "sweep-depth");
  auto e = echo("sweep-depth", profile_of(o, j), cfg);
  e["features"] = features;
  e["pretrain_corpus"] = pretrain;
  e["ks"] = ks;
  write_json(dir / "config.json", e);
  auto rows = depth_sweep(corpus, load_pretrain(pretrain), ks, cfg, o.jobs);
  write_file(dir / "depth.csv", [&](auto& os) { write_depth_csv(os, rows); });
  std::ostringstream results;
  results << "task,fold,seed,acc,auc,sen,spe,rmse\n";
  for (const auto& r : rows) {
    std::ostringstream part;
    write_results_csv(part, cfg.task + "[K=" + std::to_string(r.blocks) + "]", r.runs);
    auto text = part.str();
    results << text.substr(text.find('\n') + 1);
    print_summary("K=" + std::to_string(r.blocks), r.summary);
  }
  io::write_text(dir / "results.csv", results.str());
}

void cmd_export_attention(const Options& o) {
  const auto j = load_config(o);
  const auto ckpt = require_path(o.checkpoint, j, "checkpoint", "--checkpoint file");
  const auto features = require_path(o.features, j, "features", "--features directory");
  std::vector<int> classes = !o.classes.empty() ? o.classes : j.value("classes", std::vector<int>{});
  auto lm = model_from_checkpoint(load_checkpoint(ckpt));
  if (!lm.model->config().use_tgq) fail(ErrorCode::InvalidConfig, "checkpoint has no task queries");
  auto corpus = select_classes(load_corpus(features), classes);
  std::vector<FeatureTensor> norm;
  for (auto& t : corpus) {
    crop_epochs(t, lm.model->config().num_epochs);
    norm.push_back(normalize(t, lm.stats));
  }
  const auto dir = run_dir(o, j, "export-attention");
  auto out = evaluate_model(*lm.model, pointers(norm));
  fs::create_directories(dir / "subjects");
  const auto C = lm.channel_names.size();
  std::array<std::vector<double>, 2> mean{std::vector<double>(C), std::vector<double>(C)};
  for (std::size_t i = 0; i < norm.size(); ++i) {
    write_file(dir / "subjects" / (safe_name(norm[i].subject_id) + ".csv"),
               [&](auto& os) { write_attention_csv(os, lm.channel_names, out.attention[i]); });
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t c = 0; c < C; ++c) mean[t][c] += out.attention[i][t][c] / static_cast<double>(norm.size());
  }
  write_file(dir / "attention.csv", [&](auto& os) { write_attention_csv(os, lm.channel_names, mean); });
  write_json(dir / "config.json",
             {{"command", "export-attention"}, {"checkpoint", ckpt}, {"features", features}, {"classes", classes}});
  std::cout << "export-attention: " << norm.size() << " subjects -> " << dir.string() << '\n';
}

void cmd_mmd(const Options& o) {
  const auto j = load_config(o);
  const auto a_dir = require_path(o.set_a, j, "a", "--a features directory");
  const auto b_dir = require_path(o.set_b, j, "b", "--b features directory");
  const auto origin_a = !o.origin_a.empty() ? o.origin_a : j.value("origin_a", std::string());
  const auto origin_b = !o.origin_b.empty() ? o.origin_b : j.value("origin_b", std::string());
  const std::optional<int> class_a = o.class_a ? o.class_a : (j.contains("class_a") ? std::optional<int>(j["class_a"].get<int>()) : std::nullopt);
  const std::optional<int> class_b = o.class_b ? o.class_b : (j.contains("class_b") ? std::optional<int>(j["class_b"].get<int>()) : std::nullopt);
  const double bandwidth = o.bandwidth ? *o.bandwidth : j.value("bandwidth", 0.0);
  const bool unbiased = o.unbiased || j.value("unbiased", false);
  auto pick = [](std::vector<FeatureTensor> v, const std::string& origin, std::optional<int> cls) {
    std::vector<FeatureTensor> out;
    for (auto& t : v)
      if ((origin.empty() || to_string(t.origin) == origin) && (!cls || t.class_label == *cls))
        out.push_back(std::move(t));
    return out;
  };
  auto a = pick(load_corpus(a_dir), origin_a, class_a);
  auto b = pick(load_corpus(b_dir), origin_b, class_b);
  if (a.empty() || b.empty()) fail(ErrorCode::EmptySplit, "a selection is empty");
  // z-scored with the statistics of set A
  const auto stats = compute_feature_stats(pointers(a));
  std::vector<FeatureTensor> na, nb;
  for (const auto& t : a) na.push_back(normalize(t, stats));
  for (const auto& t : b) nb.push_back(normalize(t, stats));
  const auto ma = to_matrix(na), mb = to_matrix(nb);
  auto biased = mmd(ma, mb, MmdConfig{bandwidth, false});
  auto unb = mmd(ma, mb, MmdConfig{biased.bandwidth, true});
  const auto dir = run_dir(o, j, "mmd");
  json cfg = {{"command", "mmd"}, {"a", a_dir}, {"b", b_dir}, {"origin_a", origin_a},
              {"origin_b", origin_b}, {"bandwidth", bandwidth}, {"unbiased", unbiased}};
  if (class_a) cfg["class_a"] = *class_a;
  if (class_b) cfg["class_b"] = *class_b;
  write_json(dir / "config.json", cfg);
  write_file(dir / "mmd.csv", [&](auto& os) {
    os << "n_a,n_b,bandwidth,mmd_biased,mmd_unbiased\n"
       << na.size() << ',' << nb.size() << ',' << io::fmt9(biased.bandwidth) << ','
       << io::fmt9(biased.value) << ',' << io::fmt9(unb.value) << '\n';
  });
  std::cout << "mmd " << io::fmt9(unbiased ? unb.value : biased.value) << " bandwidth "
            << io::fmt9(biased.bandwidth) << '\n';
}

int exit_code(ErrorCode c) { return static_cast<int>(category(c)); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tgsn: EEG features, diffusion augmentation and multi-task GSA/TGQ training"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "JSON config (flags override it)");
    s->add_option("--out", o.out, "output directory (relative paths go under TGSN_RUN_DIR)");
  };
  auto experiment_flags = [&](CLI::App* s) {
    s->add_option("--profile", o.profile, "desk or full");
    s->add_option("--seed", o.seed, "single seed replacing the seed list");
    s->add_option("--jobs", o.jobs, "parallel folds/seeds")->check(CLI::PositiveNumber);
    s->add_option("--diffusion-steps", o.diffusion_steps, "diffusion steps D");
    s->add_option("--aug-ratio", o.aug_ratio, "generated samples per real sample and class");
    s->add_option("--pretrain-corpus", o.pretrain_corpus, "feature directory used to pretrain the denoiser");
    s->add_option("--features", o.features, "feature directory");
    s->add_option("--epochs", o.epochs, "maximum epochs");
    s->add_option("--folds", o.folds, "cross-validation folds");
    s->add_option("--blocks", o.blocks, "GSA blocks K");
    s->add_option("--classes", o.classes, "class subset, relabelled in the given order")->delimiter(',');
    s->add_flag("--no-ptda", o.no_ptda, "disable diffusion augmentation");
    s->add_flag("--no-gsa", o.no_gsa, "disable the GSA blocks");
    s->add_flag("--no-tgq", o.no_tgq, "replace task queries by mean pooling");
  };

  auto* synth = app.add_subcommand("synth", "write a synthetic recording corpus");
  common(synth);
  synth->add_option("--seed", o.seed);
  synth->add_option("--per-class", o.per_class, "subjects per class (one value or one per class)")->delimiter(',');
  synth->add_option("--channels", o.channels, "channel count");
  synth->add_option("--signature-channels", o.signature_channels, "channels carrying the class signal")->delimiter(',');
  synth->add_option("--duration", o.duration, "seconds per recording");
  synth->add_option("--jitter", o.jitter, "per-subject log-normal gain jitter");
  synth->add_option("--noise", o.noise, "white-noise SD");

  auto* extract = app.add_subcommand("extract", "recordings to feature tensors");
  common(extract);
  extract->add_option("--input", o.input, "recording directory");

  auto* pretrain = app.add_subcommand("pretrain-diffusion", "pretrain a denoiser");
  common(pretrain);
  experiment_flags(pretrain);

  auto* augment = app.add_subcommand("augment", "fine-tune per class and write real plus generated features");
  common(augment);
  experiment_flags(augment);
  augment->add_option("--denoiser", o.denoiser, "pretrained denoiser checkpoint");

  auto* train = app.add_subcommand("train", "k-fold training over the seed list");
  common(train);
  experiment_flags(train);

  auto* evaluate = app.add_subcommand("evaluate", "score a model checkpoint on a feature directory");
  common(evaluate);
  evaluate->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  evaluate->add_option("--features", o.features, "feature directory");
  evaluate->add_option("--classes", o.classes)->delimiter(',');

  auto* ablate = app.add_subcommand("ablate", "PTDA x GSA x TGQ on/off grid");
  common(ablate);
  experiment_flags(ablate);

  auto* sweep = app.add_subcommand("sweep-depth", "cross-validation per GSA depth");
  common(sweep);
  experiment_flags(sweep);
  sweep->add_option("--ks", o.ks, "block counts")->delimiter(',');

  auto* attn = app.add_subcommand("export-attention", "per-channel task attention CSVs");
  common(attn);
  attn->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  attn->add_option("--features", o.features, "feature directory");
  attn->add_option("--classes", o.classes)->delimiter(',');

  auto* mmd_cmd = app.add_subcommand("mmd", "maximum mean discrepancy between two feature sets");
  common(mmd_cmd);
  mmd_cmd->add_option("--a", o.set_a, "feature directory A");
  mmd_cmd->add_option("--b", o.set_b, "feature directory B");
  mmd_cmd->add_option("--origin-a", o.origin_a, "keep only this origin in A");
  mmd_cmd->add_option("--origin-b", o.origin_b, "keep only this origin in B");
  mmd_cmd->add_option("--class-a", o.class_a);
  mmd_cmd->add_option("--class-b", o.class_b);
  mmd_cmd->add_option("--bandwidth", o.bandwidth, "RBF sigma; median heuristic when omitted");
  mmd_cmd->add_flag("--unbiased", o.unbiased, "print the unbiased estimate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "tgsn: InvalidConfig: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*synth) cmd_synth(o);
    else if (*extract) cmd_extract(o);
    else if (*pretrain) cmd_pretrain(o);
    else if (*augment) cmd_augment(o);
    else if (*train) cmd_train(o);
    else if (*evaluate) cmd_evaluate(o);
    else if (*ablate) cmd_ablate(o);
    else if (*sweep) cmd_sweep(o);
    else if (*attn) cmd_export_attention(o);
    else if (*mmd_cmd) cmd_mmd(o);
  } catch (const Error& e) {
    std::cerr << "tgsn: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "tgsn: IoError: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "tgsn: Internal: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
