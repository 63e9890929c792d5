#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rdcssl/tensor.hpp"

namespace rdcssl {

// Compares the reverse-mode gradient of a scalar function w.r.t. `leaf`
// against central differences. `f` must rebuild its graph on every call and
// read `leaf` (a tensor with requires_grad). Returns
//   max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
template <std::floating_point S>
double finite_diff_check_leaf(const std::function<Tensor<S>()>& f, Tensor<S>& leaf, double eps) {
  if (!(eps >= 1e-5 && eps <= 1e-2)) throw ContractError("finite_diff_check: eps must lie in [1e-5, 1e-2]");
  if (!leaf.requires_grad()) throw ContractError("finite_diff_check: leaf does not require grad");
  leaf.zero_grad();
  Tensor<S> loss = f();
  backward(loss);
  std::vector<S> analytic(leaf.numel(), S(0));
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
  leaf.zero_grad();

  auto eval = [&]() {
    double v = f().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite function value");
    return v;
  };

  double worst = 0.0;
  auto x = leaf.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const S saved = x[i];
    x[i] = static_cast<S>(saved + eps);
    const double hi = eval();
    x[i] = static_cast<S>(saved - eps);
    const double lo = eval();
    x[i] = saved;
    const double numeric = (hi - lo) / (2.0 * eps);
    const double a = analytic[i];
    if (!std::isfinite(a)) throw NumericError("finite_diff_check: non-finite analytic gradient");
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

template <std::floating_point S>
double finite_diff_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& x, double eps) {
  auto leaf = Tensor<S>::from(x.shape(), std::vector<S>(x.data().begin(), x.data().end()), true);
  return finite_diff_check_leaf<S>([&]() { return f(leaf); }, leaf, eps);
}

}  // namespace rdcssl
