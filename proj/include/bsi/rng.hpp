#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "bsi/tensor.hpp"

namespace bsi {

/// splitmix64 finalizer; used to derive independent sub-stream seeds.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seeded generator with explicit distributions so results do not depend on
/// the standard library's std::*_distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  /// uniform in [0,1) with 53-bit resolution
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  /// standard normal via Marsaglia polar method
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u, w, s;
    do {
      u = 2.0 * uniform01() - 1.0;
      w = 2.0 * uniform01() - 1.0;
      s = u * u + w * w;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = w * f;
    have_spare_ = true;
    return u * f;
  }

  /// uniform integer in [0, n)
  int below(int n) {
    // rejection to avoid modulo bias
    const uint64_t limit = UINT64_MAX - UINT64_MAX % static_cast<uint64_t>(n);
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return static_cast<int>(x % static_cast<uint64_t>(n));
  }

  uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline void fill_normal(Tensor& t, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  for (double& x : t.v) x = mean + stddev * rng.normal();
}

}  // namespace bsi
