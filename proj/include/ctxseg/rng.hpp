#pragma once

#include "ctxseg/common.hpp"

#include <cmath>
#include <cstdint>
#include <random>

namespace ctxseg {

// splitmix64; used to derive independent stream seeds from (seed, tags...).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base) { return mix64(base); }

template <typename... Tags>
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, Tags... rest) {
  return derive_seed(mix64(base ^ mix64(tag)), rest...);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

template <typename T>
T uniform(Rng& rng, T lo, T hi) {
  std::uniform_real_distribution<T> d(lo, hi);
  return d(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
  std::uniform_int_distribution<int> d(lo, hi_inclusive);
  return d(rng);
}

template <typename T>
T gaussian(Rng& rng, T mean = T(0), T stddev = T(1)) {
  std::normal_distribution<T> d(mean, stddev);
  return d(rng);
}

// Normal(0, std) resampled until |z| <= 2*std.
template <typename T>
T truncated_normal(Rng& rng, T stddev) {
  std::normal_distribution<T> d(T(0), stddev);
  T z = d(rng);
  while (std::abs(z) > T(2) * stddev) z = d(rng);
  return z;
}

template <typename T>
void fill_truncated_normal(MatrixX<T>& m, T stddev, Rng& rng) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = truncated_normal(rng, stddev);
}

template <typename T>
void fill_gaussian(MatrixX<T>& m, T stddev, Rng& rng) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = gaussian<T>(rng, T(0), stddev);
}

// Kaiming-style init for convs/linears with known fan-in.
template <typename T>
void fill_he_normal(MatrixX<T>& m, Index fan_in, Rng& rng) {
  fill_gaussian(m, std::sqrt(T(2) / T(fan_in)), rng);
}

template <typename T>
void fill_xavier_uniform(MatrixX<T>& m, Index fan_in, Index fan_out, Rng& rng) {
  T bound = std::sqrt(T(6) / T(fan_in + fan_out));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = uniform<T>(rng, -bound, bound);
}

}  // namespace ctxseg
