#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "mobileone/tensor.hpp"

namespace mobileone {

using Rng = std::mt19937_64;

template <typename T>
void fill_normal(std::span<T> out, Rng& rng, double mean, double stddev) {
  std::normal_distribution<double> dist(mean, stddev);
  for (T& v : out) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_uniform(std::span<T> out, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& v : out) v = static_cast<T>(dist(rng));
}

template <typename T>
Tensor4<T> random_tensor(Shape4 shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor4<T> t(shape);
  fill_uniform(t.data(), rng, lo, hi);
  return t;
}

}  // namespace mobileone
