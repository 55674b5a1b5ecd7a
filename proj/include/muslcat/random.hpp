#pragma once

#include <cstdint>
#include <random>

#include "muslcat/tensor.hpp"

namespace muslcat {

using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent stream seeds from (seed, stream).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline void fill_normal(Tensor& t, Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  for (double& v : t.values()) v = dist(rng);
}

inline void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values()) v = dist(rng);
}

inline Tensor random_normal(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  fill_normal(t, rng, 0.0, stddev);
  return t;
}

}  // namespace muslcat
