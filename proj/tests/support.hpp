#pragma once

#include <vector>

#include "rdcssl/rng.hpp"
#include "rdcssl/tensor.hpp"

namespace rdcssl::testing {

template <std::floating_point S = double>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0, bool grad = false) {
  std::vector<S> v(numel(shape));
  for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
  return Tensor<S>::from(std::move(shape), std::move(v), grad);
}

template <std::floating_point S>
std::vector<S> values(const Tensor<S>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace rdcssl::testing
