#pragma once

#include <cmath>

#include "dtn/random.hpp"
#include "dtn/tensor.hpp"

namespace dtn::init {

template <typename T>
Tensor<T> truncated_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.truncated_normal(stddev));
  return Tensor<T>::from_vector(std::move(shape), std::move(v), true);
}

/// Normal(0, sqrt(2 / fan_in)).
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>::from_vector(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> constant(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value, true);
}

}  // namespace dtn::init
