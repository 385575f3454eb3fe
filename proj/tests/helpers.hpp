#pragma once

#include <random>

#include "sharedtext/tensor.hpp"

namespace sharedtext::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline Var random_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return parameter(random_tensor(std::move(shape), rng, lo, hi));
}

}  // namespace sharedtext::testing
