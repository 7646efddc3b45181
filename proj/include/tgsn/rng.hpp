#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace tgsn {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent child seeds so that a
// stream's values never depend on how many draws a sibling stream consumed.
inline constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix_seed(seed);
  for (auto p : path) s = mix_seed(s ^ mix_seed(p + 0x632BE59BD9B4E019ull));
  return s;
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

// Normal(0, sd) truncated at two standard deviations by resampling.
inline double truncated_normal(Rng& rng, double sd) {
  for (;;) {
    double z = standard_normal(rng);
    if (z >= -2.0 && z <= 2.0) return z * sd;
  }
}

}  // namespace tgsn
