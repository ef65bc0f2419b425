#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "ror/tensor.hpp"

namespace ror {

/// Variance of the He/MSR normal initializer.
inline double he_variance(Index fan_in) {
  if (fan_in <= 0) throw ConfigError("he_init: fan_in must be positive");
  return 2.0 / static_cast<double>(fan_in);
}

/// Zero-mean normal with variance 2 / fan_in, drawn in storage order.
template <typename Scalar, typename Rng>
Tensor<Scalar> he_init(const Shape& shape, Index fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(he_variance(fan_in)));
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

/// FNV-1a; stable across platforms, used to derive per-name seeds.
inline std::uint64_t fnv1a(std::string_view text, std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char ch : text) {
    hash ^= ch;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

/// splitmix64 finalizer for combining seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace ror
