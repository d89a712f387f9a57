// SPDX-License-Identifier: Apache-2.0
//
// Small fixtures shared by the unit tests.

#pragma once

#include <random>
#include <vector>

#include "mtlab/ops.hpp"

namespace mtlab::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// sum(x * R) for a fixed random R: a scalar whose gradient is R.
inline Tensor project(const Tensor& x, std::uint64_t seed) {
  return sum(mul(x, random_tensor(x.shape(), seed ^ 0xabcdefULL, false)));
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace mtlab::testing
