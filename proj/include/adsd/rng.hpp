#pragma once

#include <cmath>
#include <cstdint>

namespace adsd {

// SplitMix64. One 64-bit word of state, output constants from Steele et al.
// Every random draw in the project (data synthesis, augmentation, parameter
// init, epoch shuffles) comes from this generator so that a fixed seed gives
// the same stream on any platform.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0. Modulo bias is irrelevant at
  // the ranges used here (n << 2^64) but we keep the rejection loop anyway.
  std::uint64_t uniform_index(std::uint64_t n) {
    const std::uint64_t limit = ~0ULL - (~0ULL % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; caches the spare value.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Mixes a seed with stream labels so independent random streams (per sample,
// per epoch, ...) can be derived from a single run seed.
inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  SplitMix64 g(a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2)));
  return g.next_u64();
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag) {
  return hash_combine(seed, tag);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) {
  return hash_combine(hash_combine(seed, tag), index);
}

}  // namespace adsd
