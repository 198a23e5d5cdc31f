// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "numeric.hpp"

namespace moocembed {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Counter-based random stream. Draw i of a stream is a pure function of (key, i), so
/// sequences are identical on every platform and streams derived from distinct ids
/// never share state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(detail::mix64(seed + detail::kGolden)) {}

  /// Independent stream identified by `id` under this stream's key.
  Rng derive(std::uint64_t id) const {
    Rng r;
    r.key_ = detail::mix64(key_ ^ detail::mix64(id * detail::kGolden + 0x632BE59BD9B4E019ULL));
    return r;
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t position() const noexcept { return position_; }
  void set_position(std::uint64_t p) noexcept { position_ = p; }

  std::uint64_t next_u64() { return detail::mix64(key_ + (++position_) * detail::kGolden); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; consumes two draws.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Poisson count with the given mean (Knuth multiplication, split into chunks for large means).
  std::uint64_t poisson(double mean) {
    if (!(mean > 0.0)) return 0;
    std::uint64_t total = 0;
    while (mean > 0.0) {
      const double chunk = std::min(mean, 20.0);
      mean -= chunk;
      const double limit = std::exp(-chunk);
      double p = uniform();
      while (p > limit) {
        ++total;
        p *= uniform();
      }
    }
    return total;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t position_ = 0;
};

inline Array rng_normal(Rng& rng, Shape shape) {
  Array a(std::move(shape));
  for (auto& v : a.data()) v = rng.normal();
  return a;
}

inline Array rng_uniform(Rng& rng, Shape shape, double lo, double hi) {
  Array a(std::move(shape));
  for (auto& v : a.data()) v = rng.uniform(lo, hi);
  return a;
}

}  // namespace moocembed
