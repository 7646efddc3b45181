#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

namespace tgsn::testing {

inline std::vector<double> sine(double hz, double fs, std::size_t n, double amp = 1.0) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i)
    x[i] = amp * std::sin(2 * std::numbers::pi * hz * static_cast<double>(i) / fs);
  return x;
}

inline double population_variance(std::span<const double> x) {
  double m = 0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size());
}

inline double hjorth_mobility_oracle(std::span<const double> x) {
  std::vector<double> d;
  for (std::size_t i = 1; i < x.size(); ++i) d.push_back(x[i] - x[i - 1]);
  return std::sqrt(population_variance(d) / population_variance(x));
}

// Direct count over every ordered template pair, halved.
inline std::optional<double> sample_entropy_oracle(std::span<const double> x, int m, double rf) {
  const std::size_t n = x.size(), mm = static_cast<std::size_t>(m);
  const double r = rf * std::sqrt(population_variance(x));
  auto close = [&](std::size_t i, std::size_t j, std::size_t len) {
    double d = 0;
    for (std::size_t k = 0; k < len; ++k) d = std::max(d, std::abs(x[i + k] - x[j + k]));
    return d <= r;
  };
  double a = 0, b = 0;
  for (std::size_t i = 0; i < n - mm; ++i)
    for (std::size_t j = 0; j < n - mm; ++j) {
      if (i == j) continue;
      if (close(i, j, mm)) b += 1;
      if (close(i, j, mm + 1)) a += 1;
    }
  if (a == 0 || b == 0) return std::nullopt;
  return -std::log((a / 2) / (b / 2));
}

// Rectangular-window periodogram of the whole signal, one-sided, integrated over [lo, hi).
inline double direct_dft_band_power(std::span<const double> x, double fs, double lo, double hi) {
  const std::size_t n = x.size();
  double mean = 0;
  for (double v : x) mean += v / static_cast<double>(n);
  double acc = 0;
  for (std::size_t k = 1; k <= n / 2; ++k) {
    const double f = fs * static_cast<double>(k) / static_cast<double>(n);
    if (f < lo || f >= hi) continue;
    double re = 0, im = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double ph = 2 * std::numbers::pi * static_cast<double>(k * i % n) / static_cast<double>(n);
      re += (x[i] - mean) * std::cos(ph);
      im -= (x[i] - mean) * std::sin(ph);
    }
    const double p = (re * re + im * im) / (static_cast<double>(n) * static_cast<double>(n));
    acc += (2 * k == n) ? p : 2 * p;
  }
  return acc;
}

// Welch's unequal-variance t statistic for mean(a) - mean(b).
inline double welch_t(std::span<const double> a, std::span<const double> b) {
  auto ms = [](std::span<const double> x) {
    double m = 0;
    for (double v : x) m += v;
    m /= static_cast<double>(x.size());
    double s = 0;
    for (double v : x) s += (v - m) * (v - m);
    return std::pair{m, s / static_cast<double>(x.size() - 1)};
  };
  auto [ma, va] = ms(a);
  auto [mb, vb] = ms(b);
  return (ma - mb) / std::sqrt(va / static_cast<double>(a.size()) + vb / static_cast<double>(b.size()));
}

// Biased squared MMD by explicit double sums with the Gaussian kernel of width sigma.
inline double mmd_oracle(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                         double sigma) {
  auto k = [&](const std::vector<double>& x, const std::vector<double>& y) {
    double d = 0;
    for (std::size_t i = 0; i < x.size(); ++i) d += (x[i] - y[i]) * (x[i] - y[i]);
    return std::exp(-d / (2 * sigma * sigma));
  };
  long double s = 0;
  for (const auto& x : a)
    for (const auto& y : a) s += k(x, y) / static_cast<double>(a.size() * a.size());
  for (const auto& x : b)
    for (const auto& y : b) s += k(x, y) / static_cast<double>(b.size() * b.size());
  for (const auto& x : a)
    for (const auto& y : b) s -= 2 * k(x, y) / static_cast<double>(a.size() * b.size());
  return static_cast<double>(s);
}

}  // namespace tgsn::testing
