#pragma once

// Multi-band feature fusion: band decomposition, 2 s epoching, and the five
// per-band descriptors (Hjorth mobility/complexity, sample entropy, Welch band
// power, relative spectral density) assembled into an F x C x T1 tensor.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tgsn/data_model.hpp"
#include "tgsn/dsp.hpp"
#include "tgsn/error.hpp"
#include "tgsn/io.hpp"

namespace tgsn {

struct BandSpec {
  std::string name;
  double lo_hz = 0;
  double hi_hz = 0;
};

inline std::vector<BandSpec> default_bands() {
  return {{"Delta", 1, 4}, {"Theta", 4, 8}, {"Alpha", 8, 13},
          {"Beta", 13, 30}, {"Gamma", 30, 50}};
}

inline const std::vector<std::string>& per_band_feature_names() {
  static const std::vector<std::string> names = {"HM", "HC", "SampEn", "PSD", "RSD"};
  return names;
}
inline constexpr std::size_t kFeaturesPerBand = 5;

struct FeatureConfig {
  std::vector<BandSpec> bands = default_bands();
  double epoch_s = 2.0;
  int sampen_m = 2;
  double sampen_r = 0.2;  // tolerance as a fraction of the epoch SD
  int welch_segments = 4;
  double welch_overlap = 0.5;
  std::string window = "hann";
  int bp_filter_order = 4;
  double notch_hz = 50.0;  // <= 0 disables
  double notch_q = 30.0;
  double pad_s = 2.0;  // edge extension for forward-backward filtering
  bool drop_bad_epochs = true;
};

inline void validate(const FeatureConfig& cfg, double fs) {
  auto bad = [](const std::string& m) { fail(ErrorCode::InvalidConfig, m); };
  if (cfg.bands.empty()) bad("no bands");
  for (const auto& b : cfg.bands) {
    if (!(b.lo_hz > 0 && b.lo_hz < b.hi_hz)) bad("band " + b.name + " needs 0 < lo < hi");
    if (!(b.hi_hz < fs / 2))
      fail(ErrorCode::BandOutOfNyquist,
           "band " + b.name + " upper edge " + io::fmt9(b.hi_hz) +
               " Hz not below Nyquist " + io::fmt9(fs / 2));
  }
  const double spe = cfg.epoch_s * fs;
  if (!(cfg.epoch_s > 0) || std::abs(spe - std::round(spe)) > 1e-9)
    bad("epoch_s * fs must be integral");
  if (cfg.welch_segments < 1) bad("welch_segments must be >= 1");
  if (!(cfg.welch_overlap >= 0 && cfg.welch_overlap < 1)) bad("welch_overlap in [0,1)");
  if (cfg.window != "hann" && cfg.window != "boxcar") bad("window must be hann or boxcar");
  if (cfg.sampen_m < 1 || !(cfg.sampen_r > 0)) bad("sampen m >= 1 and r > 0");
  if (cfg.bp_filter_order < 1) bad("bp_filter_order >= 1");
}

// S[b][c][t1][t2], stored flat.
struct BandEpochs {
  std::size_t bands = 0, channels = 0, epochs = 0, epoch_len = 0;
  std::vector<double> data;

  std::span<const double> epoch(std::size_t b, std::size_t c, std::size_t t1) const {
    return {data.data() + ((b * channels + c) * epochs + t1) * epoch_len, epoch_len};
  }
};

inline BandEpochs preprocess(const RawRecording& rec, const FeatureConfig& cfg) {
  if (!(rec.fs > 0)) fail(ErrorCode::InvalidRecording, "fs must be positive");
  validate(cfg, rec.fs);
  const auto epoch_len = static_cast<std::size_t>(std::llround(cfg.epoch_s * rec.fs));
  const auto len = rec.num_samples();
  const std::size_t t1 = len / epoch_len;
  if (t1 == 0)
    fail(ErrorCode::EmptyEpochs, std::to_string(len) + " samples hold no complete " +
                                     io::fmt9(cfg.epoch_s) + " s epoch");

  BandEpochs out;
  out.bands = cfg.bands.size();
  out.channels = rec.num_channels();
  out.epochs = t1;
  out.epoch_len = epoch_len;
  out.data.resize(out.bands * out.channels * t1 * epoch_len);

  const auto padlen = static_cast<std::size_t>(std::llround(cfg.pad_s * rec.fs));
  std::vector<dsp::Sos> filters;
  for (const auto& b : cfg.bands)
    filters.push_back(dsp::butter_bandpass(cfg.bp_filter_order, b.lo_hz, b.hi_hz, rec.fs));
  dsp::Sos notch;
  if (cfg.notch_hz > 0 && cfg.notch_hz < rec.fs / 2)
    notch.push_back(dsp::notch(cfg.notch_hz, cfg.notch_q, rec.fs));

  std::vector<double> x(len);
  for (std::size_t c = 0; c < out.channels; ++c) {
    std::copy(rec.samples[c].begin(), rec.samples[c].end(), x.begin());
    if (!notch.empty()) x = dsp::filtfilt(notch, x, padlen);
    for (std::size_t b = 0; b < out.bands; ++b) {
      auto y = dsp::filtfilt(filters[b], x, padlen);
      for (std::size_t e = 0; e < t1; ++e)
        std::copy_n(y.begin() + static_cast<std::ptrdiff_t>(e * epoch_len), epoch_len,
                    out.data.begin() + static_cast<std::ptrdiff_t>(
                                           ((b * out.channels + c) * t1 + e) * epoch_len));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-epoch descriptors

namespace detail {

struct Moments {
  double mean = 0, var = 0;
};

inline Moments moments(std::span<const double> x) {
  Moments m;
  if (x.empty()) return m;
  m.mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double s = 0;
  for (double v : x) s += (v - m.mean) * (v - m.mean);
  m.var = s / static_cast<double>(x.size());
  return m;
}

inline bool degenerate(const Moments& m) {
  return !(m.var > 1e-20 * m.mean * m.mean);
}

inline std::vector<double> diff(std::span<const double> x) {
  std::vector<double> d(x.size() > 0 ? x.size() - 1 : 0);
  for (std::size_t i = 0; i + 1 < x.size(); ++i) d[i] = x[i + 1] - x[i];
  return d;
}

inline double mobility_unchecked(std::span<const double> x, const Moments& mx) {
  auto d = diff(x);
  auto md = moments(d);
  if (degenerate(md)) fail(ErrorCode::ZeroVariance, "first difference has zero variance");
  return std::sqrt(md.var / mx.var);
}

}  // namespace detail

// sqrt(Var(dx) / Var(x)) with dx the first difference.
inline double hjorth_mobility(std::span<const double> x) {
  if (x.size() < 3) fail(ErrorCode::TooShort, "Hjorth needs at least 3 samples");
  auto mx = detail::moments(x);
  if (detail::degenerate(mx)) fail(ErrorCode::ZeroVariance, "constant epoch");
  return std::sqrt(detail::moments(detail::diff(x)).var / mx.var);
}

inline double hjorth_complexity(std::span<const double> x) {
  if (x.size() < 4) fail(ErrorCode::TooShort, "Hjorth complexity needs at least 4 samples");
  auto mx = detail::moments(x);
  if (detail::degenerate(mx)) fail(ErrorCode::ZeroVariance, "constant epoch");
  auto d = detail::diff(x);
  auto md = detail::moments(d);
  if (detail::degenerate(md)) fail(ErrorCode::ZeroVariance, "first difference is constant");
  return detail::mobility_unchecked(d, md) / std::sqrt(md.var / mx.var);
}

// -ln(U/V): V counts template pairs of length m within Chebyshev distance r,
// U those of length m+1; self-matches excluded, N-m templates for both.
inline double sample_entropy(std::span<const double> x, int m, double r_factor) {
  if (m < 1) fail(ErrorCode::InvalidConfig, "embedding dimension must be >= 1");
  const auto n = x.size();
  if (n < static_cast<std::size_t>(m) + 2)
    fail(ErrorCode::TooShort, "need at least m+2 samples, got " + std::to_string(n));
  auto mx = detail::moments(x);
  if (detail::degenerate(mx)) fail(ErrorCode::ZeroVariance, "constant epoch");
  const double r = r_factor * std::sqrt(mx.var);
  const auto mm = static_cast<std::size_t>(m);
  const std::size_t templates = n - mm;
  std::uint64_t v = 0, u = 0;
  for (std::size_t i = 0; i + 1 < templates; ++i) {
    for (std::size_t j = i + 1; j < templates; ++j) {
      std::size_t k = 0;
      while (k < mm && std::abs(x[i + k] - x[j + k]) <= r) ++k;
      if (k < mm) continue;
      ++v;
      if (std::abs(x[i + mm] - x[j + mm]) <= r) ++u;
    }
  }
  if (u == 0 || v == 0)
    fail(ErrorCode::NoMatches, "no template matches of length " +
                                   std::to_string(v == 0 ? m : m + 1));
  return -std::log(static_cast<double>(u) / static_cast<double>(v));
}

// One-sided power spectral density, averaged over Welch segments. Scaled so
// that sum(psd) * df equals the (mean-removed) signal variance.
struct WelchSpectrum {
  double df = 0;
  std::vector<double> freqs;
  std::vector<double> psd;
};

struct WelchLayout {
  std::size_t segment_len = 0;
  std::size_t step = 0;
};

inline WelchLayout welch_layout(std::size_t n, int segments, double overlap) {
  if (segments < 1) fail(ErrorCode::InvalidConfig, "need at least one Welch segment");
  const double span_factor = 1.0 + (segments - 1) * (1.0 - overlap);
  WelchLayout lay;
  lay.segment_len = static_cast<std::size_t>(std::floor(static_cast<double>(n) / span_factor));
  lay.step = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(lay.segment_len * (1.0 - overlap))));
  if (lay.segment_len < 2 ||
      (segments - 1) * lay.step + lay.segment_len > n)
    fail(ErrorCode::SegmentTooLong, std::to_string(segments) +
                                        " Welch segments do not fit in " +
                                        std::to_string(n) + " samples");
  return lay;
}

inline WelchSpectrum welch_density(std::span<const double> x, double fs, int segments,
                                   double overlap, const std::string& window = "hann") {
  const auto lay = welch_layout(x.size(), segments, overlap);
  const std::size_t L = lay.segment_len;
  std::vector<double> w(L, 1.0);
  if (window == "hann")
    for (std::size_t i = 0; i < L; ++i)
      w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / static_cast<double>(L));
  double wss = 0;
  for (double v : w) wss += v * v;

  const std::size_t nf = L / 2 + 1;
  std::vector<double> cos_t(L), sin_t(L);
  for (std::size_t i = 0; i < L; ++i) {
    cos_t[i] = std::cos(2.0 * std::numbers::pi * i / static_cast<double>(L));
    sin_t[i] = std::sin(2.0 * std::numbers::pi * i / static_cast<double>(L));
  }

  WelchSpectrum out;
  out.df = fs / static_cast<double>(L);
  out.freqs.resize(nf);
  out.psd.assign(nf, 0.0);
  for (std::size_t k = 0; k < nf; ++k) out.freqs[k] = k * out.df;

  std::vector<double> seg(L);
  for (int p = 0; p < segments; ++p) {
    const auto start = static_cast<std::size_t>(p) * lay.step;
    double mean = 0;
    for (std::size_t i = 0; i < L; ++i) mean += x[start + i];
    mean /= static_cast<double>(L);
    for (std::size_t i = 0; i < L; ++i) seg[i] = (x[start + i] - mean) * w[i];
    for (std::size_t k = 0; k < nf; ++k) {
      double re = 0, im = 0;
      std::size_t idx = 0;
      for (std::size_t i = 0; i < L; ++i) {
        re += seg[i] * cos_t[idx];
        im -= seg[i] * sin_t[idx];
        idx += k;
        if (idx >= L) idx -= L;
      }
      double p2 = (re * re + im * im) / (fs * wss);
      const bool edge = (k == 0) || (L % 2 == 0 && k == L / 2);
      out.psd[k] += edge ? p2 : 2.0 * p2;
    }
  }
  for (auto& v : out.psd) v /= static_cast<double>(segments);
  return out;
}

// Integrated power over lo <= f < hi (the Nyquist bin is included when hi
// reaches it).
inline double band_power(const WelchSpectrum& s, double lo_hz, double hi_hz) {
  double acc = 0;
  const double nyq = s.freqs.empty() ? 0 : s.freqs.back();
  for (std::size_t k = 0; k < s.freqs.size(); ++k) {
    const double f = s.freqs[k];
    if ((f >= lo_hz && f < hi_hz) || (f == nyq && hi_hz >= nyq && f >= lo_hz))
      acc += s.psd[k];
  }
  return acc * s.df;
}

inline double welch_psd(std::span<const double> x, double fs, const BandSpec& band,
                        const FeatureConfig& cfg) {
  auto s = welch_density(x, fs, cfg.welch_segments, cfg.welch_overlap, cfg.window);
  return band_power(s, band.lo_hz, band.hi_hz);
}

inline std::vector<double> relative_spectral_density(std::span<const double> psd) {
  double total = 0;
  for (double v : psd) {
    if (!(v >= 0) || !std::isfinite(v))
      fail(ErrorCode::ZeroPower, "band powers must be finite and non-negative");
    total += v;
  }
  if (!(total > 0)) fail(ErrorCode::ZeroPower, "all band powers are zero");
  std::vector<double> out(psd.size());
  for (std::size_t i = 0; i < psd.size(); ++i) out[i] = psd[i] / total;
  return out;
}

// ---------------------------------------------------------------------------
// Feature tensor

enum class Origin { Real, Generated, Pretrain };

inline std::string_view to_string(Origin o) {
  switch (o) {
    case Origin::Real: return "real";
    case Origin::Generated: return "generated";
    case Origin::Pretrain: return "pretrain";
  }
  return "real";
}

inline Origin origin_from_string(const std::string& s) {
  if (s == "real") return Origin::Real;
  if (s == "generated") return Origin::Generated;
  if (s == "pretrain") return Origin::Pretrain;
  fail(ErrorCode::MalformedHeader, "unknown origin '" + s + "'");
}

struct FeatureTensor {
  std::size_t num_features = 0, num_channels = 0, num_epochs = 0;
  std::vector<float> values;  // [f][c][t1]
  std::vector<std::string> feature_names;
  std::vector<std::string> channel_names;
  std::string subject_id;
  int class_label = 0;
  double mmse = 0;
  Origin origin = Origin::Real;
  std::vector<std::size_t> dropped_epochs;

  std::size_t size() const { return values.size(); }
  float& at(std::size_t f, std::size_t c, std::size_t t) {
    return values[(f * num_channels + c) * num_epochs + t];
  }
  float at(std::size_t f, std::size_t c, std::size_t t) const {
    return values[(f * num_channels + c) * num_epochs + t];
  }
};

inline std::vector<std::string> feature_names_for(const std::vector<BandSpec>& bands) {
  std::vector<std::string> out;
  for (const auto& b : bands)
    for (const auto& f : per_band_feature_names()) out.push_back(b.name + "." + f);
  return out;
}

using DropLogger = std::function<void(const std::string&)>;

inline FeatureTensor extract_features(const RawRecording& rec, const FeatureConfig& cfg,
                                      const DropLogger& log = {}) {
  auto s = preprocess(rec, cfg);
  const std::size_t B = s.bands, C = s.channels, T = s.epochs;
  const std::size_t F = kFeaturesPerBand * B;

  // feat[t][f][c]
  std::vector<double> feat(T * F * C, 0.0);
  std::vector<bool> keep(T, true);
  std::vector<double> psd(B);
  for (std::size_t t = 0; t < T; ++t) {
    try {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t b = 0; b < B; ++b) {
          auto x = s.epoch(b, c, t);
          auto coord = [&](const Error& e) {
            return Error(e.code(), std::string(e.what()) + " at (band=" + cfg.bands[b].name +
                                       ", channel=" + rec.channels[c] +
                                       ", epoch=" + std::to_string(t) + ")");
          };
          try {
            const auto base = (t * F + b * kFeaturesPerBand) * C + c;
            feat[base + 0 * C] = hjorth_mobility(x);
            feat[base + 1 * C] = hjorth_complexity(x);
            feat[base + 2 * C] = sample_entropy(x, cfg.sampen_m, cfg.sampen_r);
            psd[b] = welch_psd(x, rec.fs, cfg.bands[b], cfg);
            feat[base + 3 * C] = psd[b];
          } catch (const Error& e) {
            throw coord(e);
          }
        }
        std::vector<double> rsd;
        try {
          rsd = relative_spectral_density(psd);
        } catch (const Error& e) {
          throw Error(e.code(), std::string(e.what()) + " at (channel=" + rec.channels[c] +
                                    ", epoch=" + std::to_string(t) + ")");
        }
        for (std::size_t b = 0; b < B; ++b)
          feat[(t * F + b * kFeaturesPerBand + 4) * C + c] = rsd[b];
      }
    } catch (const Error& e) {
      if (!cfg.drop_bad_epochs) throw;
      keep[t] = false;
      if (log) log("subject " + rec.subject_id + ": dropped epoch " + std::to_string(t) +
                   ": " + e.what());
    }
  }

  FeatureTensor out;
  out.num_features = F;
  out.num_channels = C;
  out.feature_names = feature_names_for(cfg.bands);
  out.channel_names = rec.channels;
  out.subject_id = rec.subject_id;
  out.class_label = rec.class_label;
  out.mmse = rec.mmse;
  std::vector<std::size_t> kept;
  for (std::size_t t = 0; t < T; ++t) {
    if (keep[t]) kept.push_back(t);
    else out.dropped_epochs.push_back(t);
  }
  if (kept.empty())
    fail(ErrorCode::EmptyEpochs, "every epoch of " + rec.subject_id + " was dropped");
  out.num_epochs = kept.size();
  out.values.resize(F * C * kept.size());
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < kept.size(); ++i)
        out.at(f, c, i) = static_cast<float>(feat[(kept[i] * F + f) * C + c]);
  return out;
}

// ---------------------------------------------------------------------------
// Per-feature z-scoring; statistics pooled over channels and epochs.

struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> sd;
};

inline FeatureStats compute_feature_stats(std::span<const FeatureTensor* const> train) {
  if (train.empty()) fail(ErrorCode::EmptySplit, "no tensors for normalization statistics");
  const auto F = train.front()->num_features;
  FeatureStats st;
  st.mean.assign(F, 0.0);
  st.sd.assign(F, 0.0);
  std::vector<double> count(F, 0.0);
  for (const auto* t : train) {
    if (t->num_features != F) fail(ErrorCode::ShapeMismatch, "feature count differs");
    const auto per = t->num_channels * t->num_epochs;
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < per; ++i) {
        st.mean[f] += t->values[f * per + i];
        count[f] += 1;
      }
  }
  for (std::size_t f = 0; f < F; ++f) st.mean[f] /= count[f];
  for (const auto* t : train) {
    const auto per = t->num_channels * t->num_epochs;
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < per; ++i) {
        const double d = t->values[f * per + i] - st.mean[f];
        st.sd[f] += d * d;
      }
  }
  for (std::size_t f = 0; f < F; ++f) {
    st.sd[f] = std::sqrt(st.sd[f] / count[f]);
    if (!(st.sd[f] > 0)) st.sd[f] = 1.0;
  }
  return st;
}

inline FeatureTensor normalize(const FeatureTensor& t, const FeatureStats& st) {
  if (st.mean.size() != t.num_features)
    fail(ErrorCode::ShapeMismatch, "statistics do not match feature count");
  FeatureTensor out = t;
  const auto per = t.num_channels * t.num_epochs;
  for (std::size_t f = 0; f < t.num_features; ++f)
    for (std::size_t i = 0; i < per; ++i)
      out.values[f * per + i] =
          static_cast<float>((t.values[f * per + i] - st.mean[f]) / st.sd[f]);
  return out;
}

inline FeatureTensor denormalize(const FeatureTensor& t, const FeatureStats& st) {
  FeatureTensor out = t;
  const auto per = t.num_channels * t.num_epochs;
  for (std::size_t f = 0; f < t.num_features; ++f)
    for (std::size_t i = 0; i < per; ++i)
      out.values[f * per + i] =
          static_cast<float>(t.values[f * per + i] * st.sd[f] + st.mean[f]);
  return out;
}

// Keeps the first t1 epochs.
inline void crop_epochs(FeatureTensor& t, std::size_t t1) {
  if (t1 > t.num_epochs) fail(ErrorCode::ShapeMismatch, "cannot crop to more epochs than present");
  if (t.num_epochs == t1) return;
  std::vector<float> v(t.num_features * t.num_channels * t1);
  for (std::size_t f = 0; f < t.num_features; ++f)
    for (std::size_t c = 0; c < t.num_channels; ++c)
      for (std::size_t e = 0; e < t1; ++e) v[(f * t.num_channels + c) * t1 + e] = t.at(f, c, e);
  t.values = std::move(v);
  t.num_epochs = t1;
}

// Crops every tensor to the smallest epoch count in the set.
inline void crop_to_common_epochs(std::vector<FeatureTensor>& ts) {
  if (ts.empty()) return;
  std::size_t t1 = ts.front().num_epochs;
  for (const auto& t : ts) t1 = std::min(t1, t.num_epochs);
  for (auto& t : ts) crop_epochs(t, t1);
}

// ---------------------------------------------------------------------------
// TGSN-FEAT v1 file
//   TGSN-FEAT v1
//   subject_id,F,C,T1,class,mmse,origin
//   feature names (F, comma separated)
//   channel names (C, comma separated)
//   <F*C*T1 float32 little-endian, [f][c][t1]>

inline constexpr std::string_view kFeatureMagic = "TGSN-FEAT v1";

inline void write_features(std::ostream& os, const FeatureTensor& t) {
  os << kFeatureMagic << '\n'
     << t.subject_id << ',' << t.num_features << ',' << t.num_channels << ','
     << t.num_epochs << ',' << t.class_label << ',' << io::fmt9(t.mmse) << ','
     << to_string(t.origin) << '\n';
  for (std::size_t i = 0; i < t.feature_names.size(); ++i)
    os << (i ? "," : "") << t.feature_names[i];
  os << '\n';
  for (std::size_t i = 0; i < t.channel_names.size(); ++i)
    os << (i ? "," : "") << t.channel_names[i];
  os << '\n';
  io::write_f32_le(os, t.values);
}

inline void write_features(const std::filesystem::path& p, const FeatureTensor& t) {
  auto os = io::open_out(p, true);
  write_features(os, t);
}

inline FeatureTensor read_features(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kFeatureMagic)
    fail(ErrorCode::MalformedHeader, "missing 'TGSN-FEAT v1' magic line");
  if (!std::getline(is, line)) fail(ErrorCode::MalformedHeader, "missing header line");
  auto h = io::split(line, ',');
  if (h.size() != 7) fail(ErrorCode::MalformedHeader, "feature header needs 7 fields");
  FeatureTensor t;
  t.subject_id = h[0];
  auto f = io::parse_int(h[1], "F"), c = io::parse_int(h[2], "C"),
       e = io::parse_int(h[3], "T1");
  if (f <= 0 || c <= 0 || e <= 0) fail(ErrorCode::MalformedHeader, "non-positive dims");
  t.num_features = static_cast<std::size_t>(f);
  t.num_channels = static_cast<std::size_t>(c);
  t.num_epochs = static_cast<std::size_t>(e);
  t.class_label = static_cast<int>(io::parse_int(h[4], "class"));
  t.mmse = io::parse_number(h[5], "mmse");
  t.origin = origin_from_string(h[6]);
  if (!std::getline(is, line)) fail(ErrorCode::MalformedHeader, "missing feature names");
  t.feature_names = io::split(line, ',');
  if (!std::getline(is, line)) fail(ErrorCode::MalformedHeader, "missing channel names");
  t.channel_names = io::split(line, ',');
  if (t.feature_names.size() != t.num_features)
    fail(ErrorCode::MalformedHeader, "feature name count differs from F");
  if (t.channel_names.size() != t.num_channels)
    fail(ErrorCode::ChannelMismatch, "channel name count differs from C");
  t.values.resize(t.num_features * t.num_channels * t.num_epochs);
  if (io::read_f32_le(is, t.values) != t.values.size())
    fail(ErrorCode::SampleCountMismatch, "feature payload truncated");
  if (is.peek() != std::char_traits<char>::eof())
    fail(ErrorCode::SampleCountMismatch, "trailing bytes after feature payload");
  for (float v : t.values)
    if (!std::isfinite(v)) fail(ErrorCode::NonFiniteSample, "non-finite feature value");
  return t;
}

inline FeatureTensor load_features(const std::filesystem::path& p) {
  auto is = io::open_in(p, true);
  return read_features(is);
}

}  // namespace tgsn
