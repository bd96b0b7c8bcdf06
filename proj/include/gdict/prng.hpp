#pragma once

#include <cmath>
#include <cstdint>
#include <span>

namespace gdict {

// Counter-based 64-bit generator. The n-th raw output is a pure function of
// (key, n), so any position in the stream can be reproduced without replaying
// the stream, and sub-streams derived via split() never collide with the
// parent. The word function is the SplitMix64 finalizer applied to
// key ^ (n * C1 + C2), with
//   C1 = 0xD1B54A32D192ED03, C2 = 0x8CB92BA72F3D8DD7 (odd constants),
//   finalizer multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB.
// The exact arithmetic below is part of every file/checkpoint determinism
// contract in this library; do not change it.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed)
      : key_(finalize(seed ^ 0xA3EC647659359ACDull)) {}

  static std::uint64_t finalize(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static std::uint64_t word(std::uint64_t key, std::uint64_t counter) {
    return finalize(key ^ (counter * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
  }

  std::uint64_t next_u64() { return word(key_, counter_++); }

  // Independent sub-stream; one per batch index, feature index, etc.
  CounterRng split(std::uint64_t stream) const {
    CounterRng r(0);
    r.key_ = finalize(key_ ^ word(0x6A09E667F3BCC908ull, stream));
    r.counter_ = 0;
    r.cached_valid_ = false;
    return r;
  }

  // Uniform on [0, 1), 53 bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]; safe as a log() argument.
  double next_unit_open() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Unbiased-enough integer in [0, n) via 128-bit multiply-shift.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (cached_valid_) {
      cached_valid_ = false;
      return cached_;
    }
    const double u1 = next_unit_open();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    cached_valid_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform direction on the unit sphere in R^n (normalized Gaussian vector).
  void unit_sphere(std::span<double> out) {
    double norm_sq = 0.0;
    do {
      norm_sq = 0.0;
      for (double& v : out) {
        v = normal();
        norm_sq += v * v;
      }
    } while (norm_sq < 1e-300);
    const double inv = 1.0 / std::sqrt(norm_sq);
    for (double& v : out) v *= inv;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_ = 0.0;
  bool cached_valid_ = false;
};

}  // namespace gdict
