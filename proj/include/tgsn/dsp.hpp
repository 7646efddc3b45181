#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <vector>

#include "tgsn/error.hpp"

namespace tgsn::dsp {

// Direct-form II transposed biquad, normalized so a0 == 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
};

using Sos = std::vector<Biquad>;

// Digital Butterworth band-pass of prototype order `order` (2*order poles):
// analog low-pass prototype, low-pass to band-pass transform, bilinear
// transform with pre-warped edges. Unity gain at the digital centre frequency.
inline Sos butter_bandpass(int order, double lo_hz, double hi_hz, double fs) {
  if (order < 1) fail(ErrorCode::InvalidConfig, "filter order must be >= 1");
  if (!(lo_hz > 0 && lo_hz < hi_hz && hi_hz < fs / 2))
    fail(ErrorCode::BandOutOfNyquist,
         "band [" + std::to_string(lo_hz) + ", " + std::to_string(hi_hz) +
             "] Hz invalid for fs=" + std::to_string(fs));
  using cd = std::complex<double>;
  const double k = 2.0 * fs;
  const double w1 = k * std::tan(std::numbers::pi * lo_hz / fs);
  const double w2 = k * std::tan(std::numbers::pi * hi_hz / fs);
  const double bw = w2 - w1;
  const double w0sq = w1 * w2;

  std::vector<cd> zpoles;
  for (int i = 0; i < order; ++i) {
    const double theta = std::numbers::pi * (2.0 * i + order + 1) / (2.0 * order);
    const cd p = std::polar(1.0, theta);
    const cd pb = p * bw;
    const cd disc = std::sqrt(pb * pb - 4.0 * w0sq);
    for (const cd s : {(pb + disc) / 2.0, (pb - disc) / 2.0})
      zpoles.push_back((k + s) / (k - s));
  }

  // Conjugate pairs first (take the upper-half member), then real poles pairwise.
  std::vector<cd> upper, real;
  for (const auto& z : zpoles) {
    if (std::abs(z.imag()) < 1e-12 * std::max(1.0, std::abs(z)))
      real.push_back(z.real());
    else if (z.imag() > 0)
      upper.push_back(z);
  }
  std::sort(real.begin(), real.end(),
            [](const cd& a, const cd& b) { return a.real() < b.real(); });

  Sos sos;
  for (const auto& z : upper)
    sos.push_back({1.0, 0.0, -1.0, -2.0 * z.real(), std::norm(z)});
  for (std::size_t i = 0; i + 1 < real.size(); i += 2)
    sos.push_back({1.0, 0.0, -1.0, -(real[i].real() + real[i + 1].real()),
                   real[i].real() * real[i + 1].real()});

  const double wc = 2.0 * std::atan(std::sqrt(w0sq) / k);
  const cd zc = std::polar(1.0, wc);
  cd h = 1.0;
  for (const auto& q : sos) {
    const cd zi = 1.0 / zc;
    h *= (q.b0 + q.b1 * zi + q.b2 * zi * zi) / (1.0 + q.a1 * zi + q.a2 * zi * zi);
  }
  const double g = 1.0 / std::abs(h);
  sos.front().b0 *= g;
  sos.front().b1 *= g;
  sos.front().b2 *= g;
  return sos;
}

// Second-order IIR notch (RBJ cookbook form).
inline Biquad notch(double f0_hz, double q, double fs) {
  if (!(f0_hz > 0 && f0_hz < fs / 2))
    fail(ErrorCode::BandOutOfNyquist, "notch frequency outside (0, fs/2)");
  const double w0 = 2.0 * std::numbers::pi * f0_hz / fs;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  return {1.0 / a0, -2.0 * std::cos(w0) / a0, 1.0 / a0, -2.0 * std::cos(w0) / a0,
          (1.0 - alpha) / a0};
}

inline double magnitude(const Sos& sos, double f_hz, double fs) {
  using cd = std::complex<double>;
  const cd zi = std::polar(1.0, -2.0 * std::numbers::pi * f_hz / fs);
  cd h = 1.0;
  for (const auto& q : sos)
    h *= (q.b0 + q.b1 * zi + q.b2 * zi * zi) / (1.0 + q.a1 * zi + q.a2 * zi * zi);
  return std::abs(h);
}

inline void sosfilt_inplace(const Sos& sos, std::span<double> x) {
  for (const auto& q : sos) {
    double s1 = 0, s2 = 0;
    for (auto& v : x) {
      const double in = v;
      const double out = q.b0 * in + s1;
      s1 = q.b1 * in - q.a1 * out + s2;
      s2 = q.b2 * in - q.a2 * out;
      v = out;
    }
  }
}

// Forward-backward filtering with odd-symmetric edge extension.
inline std::vector<double> filtfilt(const Sos& sos, std::span<const double> x,
                                    std::size_t padlen) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  padlen = std::min(padlen, n - 1);
  std::vector<double> ext(n + 2 * padlen);
  for (std::size_t i = 0; i < padlen; ++i) {
    ext[padlen - 1 - i] = 2.0 * x[0] - x[i + 1];
    ext[padlen + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];
  }
  std::copy(x.begin(), x.end(), ext.begin() + static_cast<std::ptrdiff_t>(padlen));
  sosfilt_inplace(sos, ext);
  std::reverse(ext.begin(), ext.end());
  sosfilt_inplace(sos, ext);
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(padlen),
          ext.begin() + static_cast<std::ptrdiff_t>(padlen + n)};
}

}  // namespace tgsn::dsp
