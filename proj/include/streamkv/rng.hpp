// Copyright 2026 The streamkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "streamkv/core.hpp"

namespace streamkv {

/// SplitMix64 generator. Chosen over std::mt19937 plus the standard
/// distributions because the distributions are implementation-defined; this
/// keeps every seeded draw reproducible down to the bit.
class SplitMix64 {
public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in (0, 1]; never returns 0 so it is safe under log().
  double next_unit() { return double((next() >> 11) + 1) * 0x1.0p-53; }

  /// Standard normal via Box-Muller. Each call consumes exactly two uniform
  /// draws (no caching) so the draw order stays trivially documented.
  double next_gaussian() {
    const double u1 = next_unit();
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  float next_gaussian_f() { return float(next_gaussian()); }

private:
  std::uint64_t state_;
};

/// Mixes stream identifiers into sub-seeds so independent draws never share a
/// generator state.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  SplitMix64 g(seed ^ (stream * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull));
  return g.next();
}

/// Fills a matrix with unscaled standard-normal entries in row-major order.
inline void fill_gaussian(Matrix& m, SplitMix64& rng, float scale = 1.0f) {
  for (float& x : m.data()) x = rng.next_gaussian_f() * scale;
}

inline std::vector<float> gaussian_vector(std::size_t n, SplitMix64& rng,
                                          float scale = 1.0f) {
  std::vector<float> v(n);
  for (float& x : v) x = rng.next_gaussian_f() * scale;
  return v;
}

}  // namespace streamkv
