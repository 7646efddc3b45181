#pragma once

// Named parameter tables, Adam, and the TGSN-CKPT v1 checkpoint format.

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tgsn/autodiff.hpp"
#include "tgsn/error.hpp"
#include "tgsn/io.hpp"
#include "tgsn/rng.hpp"

namespace tgsn {

inline constexpr double kInitSd = 0.02;

// LeCun-style scale for weights feeding `fan_in` inputs.
inline double fan_in_sd(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

template <class T>
class ParamSet {
 public:
  using Tensor = ad::Tensor<T>;

  ParamSet() = default;
  ParamSet(const ParamSet&) = delete;
  ParamSet& operator=(const ParamSet&) = delete;
  ParamSet(ParamSet&&) = default;
  ParamSet& operator=(ParamSet&&) = default;

  Tensor add(const std::string& name, ad::Shape shape, std::vector<T> values) {
    if (index_.count(name)) fail(ErrorCode::InvalidConfig, "duplicate parameter " + name);
    auto t = Tensor::from(std::move(shape), std::move(values), true);
    index_[name] = params_.size();
    params_.emplace_back(name, t);
    return t;
  }

  Tensor add_normal(const std::string& name, ad::Shape shape, Rng& rng, double sd = kInitSd) {
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) x = static_cast<T>(truncated_normal(rng, sd));
    return add(name, std::move(shape), std::move(v));
  }
  Tensor add_constant(const std::string& name, ad::Shape shape, T value) {
    return add(name, shape, std::vector<T>(ad::numel(shape), value));
  }

  ad::BatchNormBuffers<T>* add_buffers(const std::string& name, std::size_t channels) {
    auto [it, inserted] = buffers_.emplace(name, ad::BatchNormBuffers<T>(channels));
    if (!inserted) fail(ErrorCode::InvalidConfig, "duplicate buffer " + name);
    return &it->second;
  }

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  std::map<std::string, ad::BatchNormBuffers<T>>& buffers() { return buffers_; }
  const std::map<std::string, ad::BatchNormBuffers<T>>& buffers() const { return buffers_; }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::InvalidConfig, "no parameter " + name);
    return params_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.clear_grad();
  }

  // Value copy of every parameter and buffer.
  struct Snapshot {
    std::vector<std::vector<T>> params;
    std::map<std::string, ad::BatchNormBuffers<T>> buffers;
  };
  Snapshot snapshot() const {
    Snapshot s;
    for (const auto& [_, t] : params_) s.params.push_back(t.values());
    s.buffers = buffers_;
    return s;
  }
  void restore(const Snapshot& s) {
    if (s.params.size() != params_.size()) fail(ErrorCode::ShapeMismatch, "snapshot mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto t = params_[i].second;
      t.values() = s.params[i];
    }
    for (auto& [name, b] : buffers_) b = s.buffers.at(name);
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, ad::BatchNormBuffers<T>> buffers_;
};

// ---------------------------------------------------------------------------
// Adam with bias correction

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamMoments {
  std::vector<T> m, v;
};

// One update of `w` in place given gradient `g` at 1-based step `t`.
template <class T>
void adam_update(std::span<T> w, std::span<const T> g, AdamMoments<T>& st, long t,
                 const AdamConfig& cfg) {
  if (st.m.size() != w.size()) {
    st.m.assign(w.size(), T(0));
    st.v.assign(w.size(), T(0));
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const T gi = g.empty() ? T(0) : g[i];
    st.m[i] = static_cast<T>(cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * gi);
    st.v[i] = static_cast<T>(cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * gi * gi);
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    w[i] = static_cast<T>(w[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  AdamConfig& config() { return cfg_; }
  long steps() const { return t_; }

  // Applies one step to every parameter; an untouched parameter counts as a
  // zero gradient. Throws before modifying anything if a gradient is not finite.
  void step(ParamSet<T>& ps) {
    for (const auto& [name, t] : ps.params())
      for (T g : t.grad())
        if (!std::isfinite(g)) fail(ErrorCode::NonFiniteGradient, "gradient of " + name);
    ++t_;
    if (moments_.size() != ps.params().size()) moments_.resize(ps.params().size());
    std::size_t i = 0;
    for (const auto& [name, tensor] : ps.params()) {
      auto t = tensor;
      adam_update<T>(t.mutable_data(), t.grad(), moments_[i++], t_, cfg_);
    }
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<AdamMoments<T>> moments_;
};

// ---------------------------------------------------------------------------
// TGSN-CKPT v1
//   TGSN-CKPT v1
//   meta <single-line JSON>
//   tensors <count>
//   <name> <d0,d1,...>          (one line per tensor)
//   <float32 little-endian payload in table order>

inline constexpr std::string_view kCheckpointMagic = "TGSN-CKPT v1";

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    fail(ErrorCode::MalformedHeader, "checkpoint has no tensor " + name);
  }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os << kCheckpointMagic << '\n' << "meta " << ck.meta.dump() << '\n';
  os << "tensors " << ck.tensors.size() << '\n';
  for (const auto& t : ck.tensors) {
    os << t.name << ' ';
    for (std::size_t i = 0; i < t.shape.size(); ++i) os << (i ? "," : "") << t.shape[i];
    os << '\n';
  }
  for (const auto& t : ck.tensors) io::write_f32_le(os, t.values);
}

inline void write_checkpoint(const std::filesystem::path& p, const Checkpoint& ck) {
  auto os = io::open_out(p, true);
  write_checkpoint(os, ck);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic)
    fail(ErrorCode::MalformedHeader, "missing 'TGSN-CKPT v1' magic line");
  Checkpoint ck;
  if (!std::getline(is, line) || line.rfind("meta ", 0) != 0)
    fail(ErrorCode::MalformedHeader, "missing meta line");
  try {
    ck.meta = nlohmann::json::parse(line.substr(5));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedHeader, std::string("checkpoint meta: ") + e.what());
  }
  if (!std::getline(is, line) || line.rfind("tensors ", 0) != 0)
    fail(ErrorCode::MalformedHeader, "missing tensors line");
  const auto count = static_cast<std::size_t>(io::parse_int(line.substr(8), "tensors"));
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) fail(ErrorCode::MalformedHeader, "truncated tensor table");
    auto sp = line.rfind(' ');
    if (sp == std::string::npos) fail(ErrorCode::MalformedHeader, "bad tensor entry: " + line);
    NamedTensor t;
    t.name = line.substr(0, sp);
    for (const auto& d : io::split(line.substr(sp + 1), ','))
      t.shape.push_back(static_cast<std::size_t>(io::parse_int(d, "dim")));
    ck.tensors.push_back(std::move(t));
  }
  for (auto& t : ck.tensors) {
    t.values.resize(ad::numel(t.shape));
    if (io::read_f32_le(is, t.values) != t.values.size())
      fail(ErrorCode::SampleCountMismatch, "checkpoint payload truncated at " + t.name);
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& p) {
  auto is = io::open_in(p, true);
  return read_checkpoint(is);
}

template <class T>
void append_params(Checkpoint& ck, const ParamSet<T>& ps, const std::string& prefix = "") {
  for (const auto& [name, t] : ps.params())
    ck.tensors.push_back({prefix + name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  for (const auto& [name, b] : ps.buffers()) {
    const auto c = b.running_mean.size();
    ck.tensors.push_back({prefix + name + ".running_mean", {c},
                          std::vector<float>(b.running_mean.begin(), b.running_mean.end())});
    ck.tensors.push_back({prefix + name + ".running_var", {c},
                          std::vector<float>(b.running_var.begin(), b.running_var.end())});
  }
}

template <class T>
void load_params(const Checkpoint& ck, ParamSet<T>& ps, const std::string& prefix = "") {
  for (const auto& [name, tensor] : ps.params()) {
    const auto& src = ck.find(prefix + name);
    if (src.shape != tensor.shape())
      fail(ErrorCode::ShapeMismatch, "checkpoint tensor " + name + " has shape " +
                                         ad::shape_str(src.shape) + ", model expects " +
                                         ad::shape_str(tensor.shape()));
    auto t = tensor;
    std::copy(src.values.begin(), src.values.end(), t.values().begin());
  }
  for (auto& [name, b] : ps.buffers()) {
    const auto& m = ck.find(prefix + name + ".running_mean");
    const auto& v = ck.find(prefix + name + ".running_var");
    if (m.values.size() != b.running_mean.size() || v.values.size() != b.running_var.size())
      fail(ErrorCode::ShapeMismatch, "checkpoint buffer " + name + " size mismatch");
    std::copy(m.values.begin(), m.values.end(), b.running_mean.begin());
    std::copy(v.values.begin(), v.values.end(), b.running_var.begin());
  }
}

}  // namespace tgsn
