#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string_view>
#include <vector>

#include "ssat/common.hpp"

namespace ssat {

// splitmix64 step, used to derive independent seed streams.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic per-purpose stream derivation: every consumer of randomness
// (data order, augmentation, masking, init, ...) gets its own seed so adding
// or removing one consumer never perturbs the others.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose, std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t s = base ^ fnv1a(purpose);
  std::uint64_t h = splitmix64(s);
  s ^= a * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull;
  h ^= splitmix64(s);
  s ^= b * 0xd6e8feb86659fd93ull + 0xca5a826395121157ull;
  h ^= splitmix64(s);
  return h;
}

// mt19937_64 core with hand-rolled distributions. The standard engine output
// is bit-exact across platforms; standard <random> distributions are not, so
// all transforms live here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // [0, n), unbiased via rejection
  std::uint64_t uniform_below(std::uint64_t n) {
    check(n > 0, "Rng::uniform_below: n must be positive");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform01() - 1.0;
      v = 2.0 * uniform01() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return mean + stddev * u * m;
  }

  // resample until |x| <= 2*stddev, the usual ViT init truncation
  double truncated_normal(double stddev) {
    double x;
    do {
      x = normal(0.0, stddev);
    } while (std::fabs(x) > 2.0 * stddev);
    return x;
  }

  // Marsaglia-Tsang, extended to alpha < 1 via the boost transform
  double gamma(double alpha) {
    check(alpha > 0.0, "Rng::gamma: alpha must be positive");
    if (alpha < 1.0) {
      const double u = uniform01();
      return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform01();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    return x / (x + y);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from {0..n-1}, unsorted (partial Fisher-Yates)
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    check(k <= n, "Rng::sample_without_replacement: k > n");
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform_below(n - i));
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ssat
