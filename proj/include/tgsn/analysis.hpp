#pragma once

// MMD between feature sets, embedding-matrix export, attention CSVs and the
// GSA depth sweep.

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "tgsn/features.hpp"
#include "tgsn/io.hpp"
#include "tgsn/train.hpp"

namespace tgsn {

using Matrix = std::vector<std::vector<double>>;  // rows of equal length

struct MmdConfig {
  double bandwidth = 0;  // sigma; <= 0 selects the median heuristic
  bool unbiased = false;
};

struct MmdResult {
  double value = 0;
  double bandwidth = 0;
};

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline void check_rows(const Matrix& m, std::size_t p, const char* name) {
  for (const auto& r : m)
    if (r.size() != p)
      fail(ErrorCode::DimensionMismatch, std::string(name) + " has a row of length " +
                                             std::to_string(r.size()) + ", expected " +
                                             std::to_string(p));
}

}  // namespace detail

// Median of pairwise Euclidean distances over the pooled sample.
inline double median_bandwidth(const Matrix& a, const Matrix& b) {
  std::vector<double> d;
  std::vector<const std::vector<double>*> all;
  for (const auto& r : a) all.push_back(&r);
  for (const auto& r : b) all.push_back(&r);
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j)
      d.push_back(std::sqrt(detail::sq_dist(*all[i], *all[j])));
  if (d.empty()) return 1.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) {
    const double lo = *std::max_element(d.begin(), mid);
    med = 0.5 * (med + lo);
  }
  return med > 0 ? med : 1.0;
}

// Squared MMD with the Gaussian kernel exp(-|x-y|^2 / (2 sigma^2)).
inline MmdResult mmd(const Matrix& a, const Matrix& b, const MmdConfig& cfg = {}) {
  if (a.size() < 2 || b.size() < 2) fail(ErrorCode::DimensionMismatch, "MMD needs at least two rows per set");
  const std::size_t p = a.front().size();
  detail::check_rows(a, p, "set A");
  detail::check_rows(b, p, "set B");
  MmdResult r;
  r.bandwidth = cfg.bandwidth > 0 ? cfg.bandwidth : median_bandwidth(a, b);
  const double g = 1.0 / (2.0 * r.bandwidth * r.bandwidth);
  auto k = [&](const auto& x, const auto& y) { return std::exp(-g * detail::sq_dist(x, y)); };
  const auto n = static_cast<double>(a.size()), m = static_cast<double>(b.size());
  double kaa = 0, kbb = 0, kab = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j)
      if (!cfg.unbiased || i != j) kaa += k(a[i], a[j]);
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      if (!cfg.unbiased || i != j) kbb += k(b[i], b[j]);
  for (const auto& x : a)
    for (const auto& y : b) kab += k(x, y);
  if (cfg.unbiased)
    r.value = kaa / (n * (n - 1)) + kbb / (m * (m - 1)) - 2.0 * kab / (n * m);
  else
    r.value = std::max(0.0, kaa / (n * n) + kbb / (m * m) - 2.0 * kab / (n * m));
  return r;
}

inline Matrix to_matrix(std::span<const FeatureTensor* const> ts) {
  Matrix m;
  for (const auto* t : ts) m.emplace_back(t->values.begin(), t->values.end());
  return m;
}

inline Matrix to_matrix(const std::vector<FeatureTensor>& ts) {
  Matrix m;
  for (const auto& t : ts) m.emplace_back(t.values.begin(), t.values.end());
  return m;
}

// ---------------------------------------------------------------------------
// Embedding export: subject_id,origin,class,f1..fp

inline void export_embedding_matrix(std::ostream& os, const std::vector<FeatureTensor>& ts) {
  const std::size_t p = ts.empty() ? 0 : ts.front().values.size();
  os << "subject_id,origin,class";
  for (std::size_t i = 1; i <= p; ++i) os << ",f" << i;
  os << '\n';
  for (const auto& t : ts) {
    if (t.values.size() != p) fail(ErrorCode::DimensionMismatch, "tensors differ in size");
    os << t.subject_id << ',' << to_string(t.origin) << ',' << t.class_label;
    for (float v : t.values) os << ',' << io::fmt9(v);
    os << '\n';
  }
  if (!os) fail(ErrorCode::IoError, "failed writing embedding matrix");
}

struct EmbeddingRow {
  std::string subject_id;
  Origin origin = Origin::Real;
  int class_label = 0;
  std::vector<float> values;
};

inline std::vector<EmbeddingRow> read_embedding_matrix(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line.rfind("subject_id,origin,class", 0) != 0)
    fail(ErrorCode::MalformedHeader, "embedding matrix header missing");
  std::vector<EmbeddingRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = io::split(line, ',');
    if (f.size() < 3) fail(ErrorCode::MalformedHeader, "short embedding row");
    EmbeddingRow r;
    r.subject_id = f[0];
    r.origin = origin_from_string(f[1]);
    r.class_label = static_cast<int>(io::parse_int(f[2], "class"));
    for (std::size_t i = 3; i < f.size(); ++i)
      r.values.push_back(static_cast<float>(io::parse_number(f[i], "feature")));
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Attention export: task,channel_name,weight per evaluated subject

inline void write_attention_csv(std::ostream& os, const std::vector<std::string>& channels,
                                const std::array<std::vector<double>, 2>& maps) {
  os << "task,channel_name,weight\n";
  for (Task t : kTasks) {
    const auto& m = maps[static_cast<std::size_t>(t)];
    if (m.size() != channels.size())
      fail(ErrorCode::DimensionMismatch, "attention map length differs from channel count");
    for (std::size_t c = 0; c < channels.size(); ++c)
      os << to_string(t) << ',' << channels[c] << ',' << io::fmt9(m[c]) << '\n';
  }
}

// Attention mass of `task` on `channels`, averaged over the subjects of a run.
inline double attention_mass(const std::vector<std::array<std::vector<double>, 2>>& maps,
                             Task task, const std::vector<std::size_t>& channels) {
  if (maps.empty()) return 0.0;
  double total = 0;
  for (const auto& m : maps) {
    const auto& v = m[static_cast<std::size_t>(task)];
    for (auto c : channels) total += c < v.size() ? v[c] : 0.0;
  }
  return total / static_cast<double>(maps.size());
}

// ---------------------------------------------------------------------------
// Depth sweep

struct DepthRow {
  std::size_t blocks = 0;
  Aggregate summary;
  std::vector<FoldResult> runs;
};

inline std::vector<DepthRow> depth_sweep(const std::vector<FeatureTensor>& corpus,
                                         const std::vector<FeatureTensor>& pretrain,
                                         const std::vector<std::size_t>& ks,
                                         const ExperimentConfig& base, std::size_t jobs = 1) {
  std::vector<DepthRow> rows;
  for (auto k : ks) {
    if (k == 0) fail(ErrorCode::InvalidConfig, "depth sweep needs K >= 1");
    auto cfg = base;
    cfg.model.gsa.blocks = k;
    cfg.model.use_gsa = true;
    auto cv = run_cv(corpus, pretrain, cfg, jobs);
    rows.push_back({k, cv.summary, std::move(cv.runs)});
  }
  return rows;
}

inline void write_depth_csv(std::ostream& os, const std::vector<DepthRow>& rows) {
  os << "blocks,runs,acc_mean,acc_sd,auc_mean,auc_sd,rmse_mean,rmse_sd\n";
  for (const auto& r : rows)
    os << r.blocks << ',' << r.summary.runs << ',' << io::fmt9(r.summary.mean.acc) << ','
       << io::fmt9(r.summary.sd.acc) << ',' << io::fmt9(r.summary.mean.auc) << ','
       << io::fmt9(r.summary.sd.auc) << ',' << io::fmt9(r.summary.mean.rmse) << ','
       << io::fmt9(r.summary.sd.rmse) << '\n';
}

}  // namespace tgsn
