#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

#include "gdk/common.hpp"

namespace gdk {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic RNG. mt19937_64 raw output is fully specified by the
// standard, and all distributions below are implemented here rather than
// with std:: distributions (whose algorithms are implementation-defined),
// so streams reproduce bit-identically across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Independent substream keyed by (seed, k0, k1, ...). Used to give each
  // sample / probe / epoch its own stream.
  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> key) {
    std::uint64_t s = seed;
    std::uint64_t h = splitmix64(s);
    for (std::uint64_t k : key) {
      s ^= k + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
      h ^= splitmix64(s);
    }
    return Rng(h);
  }

  std::uint64_t next_u64() { return eng_(); }

  // Uniform on (0, 1].
  double uniform_pos() { return 1.0 - uniform(); }

  // Uniform on [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller (cosine branch only, so one draw consumes two uniforms).
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double rademacher() { return (next_u64() & 1ull) ? 1.0 : -1.0; }

  bool bernoulli(double p) { return uniform() < p; }

  // Uniform integer on [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = ~0ull - (~0ull % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  template <typename Scalar>
  Mat<Scalar> normal_matrix(Index rows, Index cols, double stddev = 1.0) {
    Mat<Scalar> m(rows, cols);
    for (Index c = 0; c < cols; ++c)
      for (Index r = 0; r < rows; ++r)
        m(r, c) = static_cast<Scalar>(stddev * normal());
    return m;
  }

  template <typename Scalar>
  Vec<Scalar> normal_vector(Index n, double stddev = 1.0) {
    return normal_matrix<Scalar>(n, 1, stddev);
  }

  template <typename Scalar>
  Vec<Scalar> rademacher_vector(Index n) {
    Vec<Scalar> v(n);
    for (Index i = 0; i < n; ++i) v(i) = static_cast<Scalar>(rademacher());
    return v;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i)
      std::swap(first[i - 1], first[uniform_int(i)]);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace gdk
