#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tgsn/autodiff.hpp"
#include "tgsn/rng.hpp"

namespace tgsn::testing {

using TensorD = ad::Tensor<double>;

inline constexpr double kFdStep = 1e-4;
inline constexpr double kGradRelTol = 1e-4;
// Gradients whose norm is below this on both sides (a key bias, to which
// softmax is invariant) are effectively compared absolutely.
inline constexpr double kGradNormFloor = 1e-6;

inline TensorD random_tensor(ad::Shape shape, Rng& rng, double sd = 1.0, bool grad = true) {
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = sd * standard_normal(rng);
  return TensorD::from(std::move(shape), std::move(v), grad);
}

// Projects an arbitrary output onto fixed random weights so that every output
// element contributes to the scalar being differentiated.
class Projector {
 public:
  explicit Projector(std::uint64_t seed) : seed_(seed) {}
  TensorD operator()(const TensorD& y) {
    if (w_.size() != y.size()) {
      Rng rng(seed_);
      w_.resize(y.size());
      for (auto& x : w_) x = standard_normal(rng);
    }
    return ad::sum_all(ad::mul(y, TensorD::from(y.shape(), w_)));
  }

 private:
  std::uint64_t seed_;
  std::vector<double> w_;
};

struct GradReport {
  double worst = 0;
  std::string where;
};

// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
// per input tensor; reports the worst one. `f` must be deterministic.
inline GradReport grad_check(const std::function<TensorD()>& f, std::vector<TensorD> inputs,
                             const std::vector<std::string>& names = {}) {
  for (auto& t : inputs) t.clear_grad();
  auto y = f();
  ad::backward(y);
  GradReport rep;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    double num2 = 0, ana2 = 0, diff2 = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t.values()[i];
      double fp, fm;
      {
        ad::NoGradGuard ng;
        t.values()[i] = orig + kFdStep;
        fp = f().item();
        t.values()[i] = orig - kFdStep;
        fm = f().item();
      }
      t.values()[i] = orig;
      const double num = (fp - fm) / (2 * kFdStep);
      num2 += num * num;
      ana2 += analytic[i] * analytic[i];
      diff2 += (num - analytic[i]) * (num - analytic[i]);
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(num2), std::sqrt(ana2), kGradNormFloor});
    if (rel >= rep.worst) {
      rep.worst = rel;
      rep.where = k < names.size() ? names[k] : "input " + std::to_string(k);
    }
  }
  return rep;
}

}  // namespace tgsn::testing
