#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "asymdsd/common.hpp"

namespace asymdsd {

// Deterministic xoshiro256++ generator with hand-rolled distributions.
// The standard <random> distributions are implementation-defined, which
// would break the byte-identical reproducibility contract of datasets,
// checkpoints, and metric logs, so everything downstream of the raw
// generator is spelled out here.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  // Derives an independent stream from (seed, salt words). Used to give
  // every (epoch, sample, purpose) its own generator so batch-parallel
  // execution stays deterministic.
  static Rng stream(uint64_t seed, std::initializer_list<uint64_t> salts) {
    uint64_t x = seed;
    uint64_t h = splitmix64(x);
    for (uint64_t s : salts) {
      x ^= s + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
      h ^= splitmix64(x);
    }
    return Rng(h);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Masked rejection keeps it exactly uniform.
  uint64_t uniform_int(uint64_t n) {
    check(n > 0, "uniform_int: n must be positive");
    if (n == 1) return 0;
    uint64_t mask = ~uint64_t(0) >> __builtin_clzll(n - 1);
    uint64_t v;
    do {
      v = next_u64() & mask;
    } while (v >= n);
    return v;
  }

  // Standard normal via Box-Muller (no cached spare, so the generator
  // state alone determines the sequence).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Normal(0, sigma) resampled into [-2 sigma, 2 sigma].
  double truncated_normal(double sigma) {
    double v = normal();
    while (std::abs(v) > 2.0) v = normal();
    return v * sigma;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = size_t(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices drawn from [0, n), in draw order.
  std::vector<int> sample_without_replacement(int n, int k) {
    check(k <= n, "sample_without_replacement: k > n");
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out(k);
    for (int i = 0; i < k; ++i) {
      const int j = i + int(uniform_int(uint64_t(n - i)));
      std::swap(pool[i], pool[j]);
      out[i] = pool[i];
    }
    return out;
  }

  std::array<uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::array<uint64_t, 4> s_{};
};

}  // namespace asymdsd
