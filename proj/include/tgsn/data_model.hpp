#pragma once

// Recordings, synthetic corpora, and subject-level cross-validation splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tgsn/error.hpp"
#include "tgsn/io.hpp"
#include "tgsn/rng.hpp"

namespace tgsn {

inline constexpr double kMmseMin = 0.0;
inline constexpr double kMmseMax = 30.0;

struct RawRecording {
  std::string subject_id;
  std::vector<std::string> channels;
  std::vector<std::vector<float>> samples;  // samples[channel][t], microvolts
  double fs = 0.0;
  int class_label = 0;
  double mmse = 0.0;

  std::size_t num_channels() const { return samples.size(); }
  std::size_t num_samples() const {
    return samples.empty() ? 0 : samples.front().size();
  }
};

inline void validate(const RawRecording& rec) {
  if (!(rec.fs > 0.0) || !std::isfinite(rec.fs))
    fail(ErrorCode::InvalidRecording, "sampling rate must be positive");
  if (rec.subject_id.empty() ||
      rec.subject_id.find_first_of(",\n\r") != std::string::npos)
    fail(ErrorCode::InvalidRecording, "subject id empty or contains a separator");
  if (rec.channels.size() != rec.samples.size())
    fail(ErrorCode::ChannelMismatch,
         std::to_string(rec.channels.size()) + " names for " +
             std::to_string(rec.samples.size()) + " channel rows");
  if (rec.samples.empty())
    fail(ErrorCode::InvalidRecording, "recording has no channels");
  std::set<std::string> names(rec.channels.begin(), rec.channels.end());
  if (names.size() != rec.channels.size())
    fail(ErrorCode::InvalidRecording, "channel names are not unique");
  for (const auto& n : rec.channels)
    if (n.empty() || n.find_first_of(",\n\r") != std::string::npos)
      fail(ErrorCode::InvalidRecording, "bad channel name '" + n + "'");
  const auto len = rec.samples.front().size();
  for (const auto& row : rec.samples)
    if (row.size() != len)
      fail(ErrorCode::SampleCountMismatch, "ragged channel rows");
  if (static_cast<double>(len) < rec.fs * 2.0)
    fail(ErrorCode::InvalidRecording,
         "need at least 2 s of data, got " + std::to_string(len) + " samples");
  if (rec.class_label < 0)
    fail(ErrorCode::InvalidRecording, "negative class label");
  if (!(rec.mmse >= kMmseMin && rec.mmse <= kMmseMax))
    fail(ErrorCode::InvalidRecording, "MMSE outside [0,30]");
  for (std::size_t c = 0; c < rec.samples.size(); ++c)
    for (std::size_t t = 0; t < len; ++t)
      if (!std::isfinite(rec.samples[c][t]))
        fail(ErrorCode::NonFiniteSample, "channel " + rec.channels[c] +
                                             " sample " + std::to_string(t));
}

// ---------------------------------------------------------------------------
// TGSN-REC v1 interchange file
//   TGSN-REC v1
//   subject_id,fs,C,L,class,mmse
//   name_1,...,name_C
//   <C*L float32 little-endian, row-major by channel>

inline constexpr std::string_view kRecordingMagic = "TGSN-REC v1";

inline void write_recording(std::ostream& os, const RawRecording& rec) {
  validate(rec);
  os << kRecordingMagic << '\n';
  os << rec.subject_id << ',' << io::fmt9(rec.fs) << ',' << rec.num_channels()
     << ',' << rec.num_samples() << ',' << rec.class_label << ','
     << io::fmt9(rec.mmse) << '\n';
  for (std::size_t c = 0; c < rec.channels.size(); ++c)
    os << (c ? "," : "") << rec.channels[c];
  os << '\n';
  for (const auto& row : rec.samples) io::write_f32_le(os, row);
}

inline void write_recording(const std::filesystem::path& path,
                            const RawRecording& rec) {
  auto os = io::open_out(path, true);
  write_recording(os, rec);
}

inline RawRecording read_recording(std::istream& is) {
  std::string magic, header, names;
  if (!std::getline(is, magic) || magic != kRecordingMagic)
    fail(ErrorCode::MalformedHeader, "missing 'TGSN-REC v1' magic line");
  if (!std::getline(is, header))
    fail(ErrorCode::MalformedHeader, "missing header line");
  auto fields = io::split(header, ',');
  if (fields.size() != 6)
    fail(ErrorCode::MalformedHeader,
         "header needs 6 fields subject_id,fs,C,L,class,mmse");
  RawRecording rec;
  rec.subject_id = fields[0];
  rec.fs = io::parse_number(fields[1], "fs");
  auto c = io::parse_int(fields[2], "C");
  auto l = io::parse_int(fields[3], "L");
  rec.class_label = static_cast<int>(io::parse_int(fields[4], "class"));
  rec.mmse = io::parse_number(fields[5], "mmse");
  if (c <= 0 || l <= 0)
    fail(ErrorCode::MalformedHeader, "C and L must be positive");
  if (!std::getline(is, names))
    fail(ErrorCode::MalformedHeader, "missing channel-name line");
  rec.channels = io::split(names, ',');
  if (rec.channels.size() != static_cast<std::size_t>(c))
    fail(ErrorCode::ChannelMismatch,
         "header declares " + std::to_string(c) + " channels, name line has " +
             std::to_string(rec.channels.size()));

  const auto len = static_cast<std::size_t>(l);
  rec.samples.assign(static_cast<std::size_t>(c), std::vector<float>(len));
  for (std::size_t ch = 0; ch < rec.samples.size(); ++ch) {
    auto got = io::read_f32_le(is, rec.samples[ch]);
    if (got != len) {
      if (got == 0)
        fail(ErrorCode::ChannelMismatch,
             "header declares " + std::to_string(c) + " channels, payload has " +
                 std::to_string(ch));
      fail(ErrorCode::SampleCountMismatch,
           "channel " + std::to_string(ch) + " has " + std::to_string(got) +
               " of " + std::to_string(len) + " samples");
    }
  }
  if (is.peek() != std::char_traits<char>::eof())
    fail(ErrorCode::SampleCountMismatch, "trailing bytes after payload");
  validate(rec);
  return rec;
}

inline RawRecording load_recording(const std::filesystem::path& path) {
  auto is = io::open_in(path, true);
  return read_recording(is);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct GeneratorBand {
  double lo_hz;
  double hi_hz;
};

inline std::vector<GeneratorBand> default_generator_bands() {
  return {{1, 4}, {4, 8}, {8, 13}, {13, 30}, {30, 50}};
}

inline std::vector<std::string> default_channel_names(std::size_t count) {
  static const std::vector<std::string> k1020 = {
      "Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2",
      "F7",  "F8",  "T3", "T4", "T5", "T6", "Fz", "Cz", "Pz"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(i < k1020.size() ? k1020[i] : "X" + std::to_string(i));
  return out;
}

struct MmseLink {
  double intercept = 28.0;
  double slope = 7.0;  // MMSE points per unit severity
  std::vector<double> class_severity = {2.0, 1.2, 0.6};
  double noise_sd = 2.0;
};

struct SynthConfig {
  std::vector<std::string> class_names = {"AD", "FTD", "VCI"};
  // XY02 proportions (56/28/31) scaled by 1/4.
  std::vector<int> subjects_per_class = {14, 7, 8};
  double fs = 200.0;
  double duration_s = 10.0;
  std::vector<std::string> channels = default_channel_names(8);
  std::vector<GeneratorBand> bands = default_generator_bands();
  std::vector<double> base_gains = {10.0, 6.0, 8.0, 3.0, 1.0};
  // class_gains[k][b]: band amplitude (microvolts RMS) on signature channels.
  std::vector<std::vector<double>> class_gains = {
      {14.0, 10.0, 4.0, 2.5, 1.0},
      {10.0, 6.0, 8.0, 6.0, 2.0},
      {11.0, 9.0, 9.0, 3.0, 1.0},
  };
  // Channels carrying the class signature; empty means all channels.
  std::vector<int> signature_channels;
  int components_per_band = 3;
  double gain_jitter_sd = 0.10;   // per-subject log-normal jitter on gains
  double strength_spread = 0.25;  // signature strength u ~ U(1-s, 1+s)
  double noise_sd = 2.0;
  MmseLink mmse_link;
  std::string subject_prefix = "S";
  std::uint64_t seed = 1;
};

inline void validate(const SynthConfig& cfg) {
  const auto k = cfg.class_names.size();
  auto bad = [](const std::string& m) { fail(ErrorCode::InvalidConfig, m); };
  if (k == 0) bad("no classes");
  if (cfg.subjects_per_class.size() != k) bad("subjects_per_class size");
  if (cfg.class_gains.size() != k) bad("class_gains size");
  if (cfg.mmse_link.class_severity.size() != k) bad("class_severity size");
  if (!(cfg.fs > 0)) bad("fs must be positive");
  if (!(cfg.duration_s >= 2.0)) bad("duration_s must be at least 2");
  if (cfg.channels.empty()) bad("no channels");
  if (cfg.base_gains.size() != cfg.bands.size()) bad("base_gains size");
  for (auto g : cfg.base_gains)
    if (!(g >= 0)) bad("gains must be non-negative");
  for (const auto& row : cfg.class_gains) {
    if (row.size() != cfg.bands.size()) bad("class_gains row size");
    for (auto g : row)
      if (!(g >= 0)) bad("gains must be non-negative");
  }
  for (auto n : cfg.subjects_per_class)
    if (n < 0) bad("negative subject count");
  for (auto c : cfg.signature_channels)
    if (c < 0 || static_cast<std::size_t>(c) >= cfg.channels.size())
      bad("signature channel out of range");
  for (const auto& b : cfg.bands)
    if (!(b.lo_hz >= 0 && b.lo_hz < b.hi_hz && b.hi_hz <= cfg.fs / 2))
      bad("generator band outside (0, fs/2]");
  if (cfg.components_per_band < 1) bad("components_per_band < 1");
  if (!(cfg.noise_sd >= 0) || !(cfg.gain_jitter_sd >= 0) ||
      !(cfg.strength_spread >= 0 && cfg.strength_spread < 1) ||
      !(cfg.mmse_link.noise_sd >= 0))
    bad("noise/jitter parameters out of range");
}

inline RawRecording synthesize_subject(const SynthConfig& cfg, int cls,
                                       int index) {
  Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(cls),
                                 static_cast<std::uint64_t>(index)}));
  const auto num_ch = cfg.channels.size();
  const auto num_b = cfg.bands.size();
  const auto len = static_cast<std::size_t>(std::llround(cfg.fs * cfg.duration_s));

  const double strength =
      1.0 + cfg.strength_spread * (2.0 * uniform01(rng) - 1.0);
  std::vector<double> jitter(num_b);
  for (auto& j : jitter) j = std::exp(cfg.gain_jitter_sd * standard_normal(rng));

  std::vector<bool> is_sig(num_ch, cfg.signature_channels.empty());
  for (auto c : cfg.signature_channels) is_sig[static_cast<std::size_t>(c)] = true;

  RawRecording rec;
  rec.subject_id = cfg.subject_prefix + cfg.class_names[static_cast<std::size_t>(cls)] +
                   "-" + std::to_string(index);
  rec.channels = cfg.channels;
  rec.fs = cfg.fs;
  rec.class_label = cls;
  rec.samples.assign(num_ch, std::vector<float>(len, 0.0f));

  const double comp_amp = std::sqrt(2.0 / cfg.components_per_band);
  std::vector<double> acc(len);
  for (std::size_t c = 0; c < num_ch; ++c) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t b = 0; b < num_b; ++b) {
      const double base = cfg.base_gains[b];
      const double target = cfg.class_gains[static_cast<std::size_t>(cls)][b];
      const double gain =
          (is_sig[c] ? base + strength * (target - base) : base) * jitter[b];
      for (int j = 0; j < cfg.components_per_band; ++j) {
        const auto& band = cfg.bands[b];
        double f = band.lo_hz + (band.hi_hz - band.lo_hz) * uniform01(rng);
        double phase = 2.0 * std::numbers::pi * uniform01(rng);
        if (gain == 0.0) continue;
        const double w = 2.0 * std::numbers::pi * f / cfg.fs;
        for (std::size_t t = 0; t < len; ++t)
          acc[t] += gain * comp_amp * std::sin(w * static_cast<double>(t) + phase);
      }
    }
    for (std::size_t t = 0; t < len; ++t) {
      double noise = cfg.noise_sd > 0 ? cfg.noise_sd * standard_normal(rng) : 0.0;
      rec.samples[c][t] = static_cast<float>(acc[t] + noise);
    }
  }

  const auto& link = cfg.mmse_link;
  double severity = link.class_severity[static_cast<std::size_t>(cls)] * strength;
  double mmse = link.intercept - link.slope * severity +
                (link.noise_sd > 0 ? link.noise_sd * standard_normal(rng) : 0.0);
  rec.mmse = std::clamp(mmse, kMmseMin, kMmseMax);
  return rec;
}

inline std::vector<RawRecording> synthesize_dataset(const SynthConfig& cfg) {
  validate(cfg);
  std::vector<RawRecording> out;
  for (std::size_t k = 0; k < cfg.class_names.size(); ++k)
    for (int i = 0; i < cfg.subjects_per_class[k]; ++i)
      out.push_back(synthesize_subject(cfg, static_cast<int>(k), i));
  return out;
}

// ---------------------------------------------------------------------------
// Subject-level k-fold splits

struct DatasetSplit {
  int fold_index = 0;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::uint64_t seed = 0;
};

// Stratified by `labels` (one per subject). Test sets partition the pool;
// a quarter of each fold's remaining subjects, per class, goes to validation.
inline std::vector<DatasetSplit> make_folds(const std::vector<std::string>& subjects,
                                            const std::vector<int>& labels, int k,
                                            std::uint64_t seed) {
  if (k < 2) fail(ErrorCode::FoldError, "k must be at least 2");
  if (labels.size() != subjects.size())
    fail(ErrorCode::FoldError, "labels/subjects size mismatch");
  if (subjects.size() < static_cast<std::size_t>(k))
    fail(ErrorCode::FoldError, "k=" + std::to_string(k) + " exceeds " +
                                   std::to_string(subjects.size()) + " subjects");
  if (std::set<std::string>(subjects.begin(), subjects.end()).size() !=
      subjects.size())
    fail(ErrorCode::FoldError, "duplicate subject ids");

  std::map<int, std::vector<std::string>> by_class;
  for (std::size_t i = 0; i < subjects.size(); ++i)
    by_class[labels[i]].push_back(subjects[i]);

  Rng rng(derive_seed(seed, {0x464F4C44ull}));
  std::vector<std::vector<std::string>> fold_members(static_cast<std::size_t>(k));
  std::size_t cursor = 0;
  for (auto& [label, ids] : by_class) {
    std::sort(ids.begin(), ids.end());
    std::shuffle(ids.begin(), ids.end(), rng);
    for (const auto& id : ids) fold_members[cursor++ % static_cast<std::size_t>(k)].push_back(id);
  }

  std::map<std::string, int> label_of;
  for (std::size_t i = 0; i < subjects.size(); ++i) label_of[subjects[i]] = labels[i];

  std::vector<DatasetSplit> out;
  for (int f = 0; f < k; ++f) {
    DatasetSplit s;
    s.fold_index = f;
    s.seed = seed;
    s.test = fold_members[static_cast<std::size_t>(f)];
    std::map<int, std::vector<std::string>> pool;
    for (int g = 0; g < k; ++g) {
      if (g == f) continue;
      for (const auto& id : fold_members[static_cast<std::size_t>(g)])
        pool[label_of[id]].push_back(id);
    }
    Rng vrng(derive_seed(seed, {0x56414Cull, static_cast<std::uint64_t>(f)}));
    for (auto& [label, ids] : pool) {
      std::sort(ids.begin(), ids.end());
      std::shuffle(ids.begin(), ids.end(), vrng);
      const std::size_t n_val = (ids.size() + 2) / 4;
      for (std::size_t i = 0; i < ids.size(); ++i)
        (i < n_val ? s.val : s.train).push_back(ids[i]);
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<DatasetSplit> make_folds(const std::vector<std::string>& subjects,
                                            int k, std::uint64_t seed) {
  return make_folds(subjects, std::vector<int>(subjects.size(), 0), k, seed);
}

inline nlohmann::json splits_to_json(const std::vector<DatasetSplit>& splits) {
  auto arr = nlohmann::json::array();
  for (const auto& s : splits)
    arr.push_back({{"fold", s.fold_index},
                   {"train", s.train},
                   {"val", s.val},
                   {"test", s.test}});
  return arr;
}

inline std::vector<DatasetSplit> splits_from_json(const nlohmann::json& j) {
  if (!j.is_array()) fail(ErrorCode::MalformedHeader, "split manifest must be an array");
  std::vector<DatasetSplit> out;
  try {
    for (const auto& e : j) {
      DatasetSplit s;
      s.fold_index = e.at("fold").get<int>();
      s.train = e.at("train").get<std::vector<std::string>>();
      s.val = e.at("val").get<std::vector<std::string>>();
      s.test = e.at("test").get<std::vector<std::string>>();
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::MalformedHeader, std::string("split manifest: ") + ex.what());
  }
  return out;
}

}  // namespace tgsn
