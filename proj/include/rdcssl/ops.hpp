#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rdcssl/linalg.hpp"
#include "rdcssl/tensor.hpp"

// Forward ops with their reverse-mode rules. Every op records a backward
// closure only when an input requires grad; inverse() is forward-only.
namespace rdcssl {

namespace detail {

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

// Right-aligned broadcasting: each dim must match or be 1 on one side.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

inline BroadcastPlan plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) shape_mismatch(op, a, b);
    p.out[i] = std::max(pa[i], pb[i]);
  }
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    p.stride_a[i] = pa[i] == 1 ? 0 : sa;
    p.stride_b[i] = pb[i] == 1 ? 0 : sb;
    sa *= pa[i];
    sb *= pb[i];
  }
  return p;
}

template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t total = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { add, sub, mul, div };

template <std::floating_point S>
Tensor<S> binary(const char* op, BinaryKind kind, const Tensor<S>& a, const Tensor<S>& b) {
  auto plan = plan_broadcast(op, a.shape(), b.shape());
  std::vector<S> out(numel(plan.out));
  auto ad = a.data();
  auto bd = b.data();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    switch (kind) {
      case BinaryKind::add: out[o] = ad[ia] + bd[ib]; break;
      case BinaryKind::sub: out[o] = ad[ia] - bd[ib]; break;
      case BinaryKind::mul: out[o] = ad[ia] * bd[ib]; break;
      case BinaryKind::div: out[o] = ad[ia] / bd[ib]; break;
    }
  });
  return make_result<S>(op, plan.out, std::move(out), {a.node(), b.node()}, [plan, kind](Node<S>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    S* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
    S* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
    const S* g = self.grad.data();
    const S* av = pa.data.data();
    const S* bv = pb.data.data();
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case BinaryKind::add:
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] += g[o];
          break;
        case BinaryKind::sub:
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] -= g[o];
          break;
        case BinaryKind::mul:
          if (ga) ga[ia] += g[o] * bv[ib];
          if (gb) gb[ib] += g[o] * av[ia];
          break;
        case BinaryKind::div:
          if (ga) ga[ia] += g[o] / bv[ib];
          if (gb) gb[ib] -= g[o] * av[ia] / (bv[ib] * bv[ib]);
          break;
      }
    });
  });
}

template <std::floating_point S, typename Fwd, typename Deriv>
Tensor<S> unary(const char* op, const Tensor<S>& a, Fwd fwd, Deriv deriv) {
  auto ad = a.data();
  std::vector<S> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
  return make_result<S>(op, a.shape(), std::move(out), {a.node()}, [deriv](Node<S>& self) {
    auto& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
  });
}

// (outer, len, inner) decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace detail

template <std::floating_point S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary("add", detail::BinaryKind::add, a, b);
}
template <std::floating_point S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary("sub", detail::BinaryKind::sub, a, b);
}
template <std::floating_point S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary("mul", detail::BinaryKind::mul, a, b);
}
template <std::floating_point S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary("div", detail::BinaryKind::div, a, b);
}

template <std::floating_point S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <std::floating_point S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <std::floating_point S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <std::floating_point S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }

template <std::floating_point S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  return detail::unary<S>("scale", a, [s](S x) { return x * s; }, [s](S, S) { return s; });
}

template <std::floating_point S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return detail::unary<S>("add_scalar", a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <std::floating_point S>
Tensor<S> operator*(S s, const Tensor<S>& a) { return scale(a, s); }
template <std::floating_point S>
Tensor<S> operator*(const Tensor<S>& a, S s) { return scale(a, s); }
template <std::floating_point S>
Tensor<S> operator-(const Tensor<S>& a) { return scale(a, S(-1)); }

template <std::floating_point S>
Tensor<S> square(const Tensor<S>& a) {
  return detail::unary<S>("square", a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

// Domain x >= 0; a negative input raises NumericError.
template <std::floating_point S>
Tensor<S> sqrt(const Tensor<S>& a) {
  for (auto v : a.data()) {
    if (!(v >= S(0))) throw NumericError("sqrt: input outside domain (value " + std::to_string(v) + ")");
  }
  return detail::unary<S>("sqrt", a, [](S x) { return std::sqrt(x); }, [](S, S y) { return S(0.5) / y; });
}

// tanh approximation of GELU.
template <std::floating_point S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  auto fwd = [](S x) {
    double xd = x;
    return static_cast<S>(0.5 * xd * (1.0 + std::tanh(c * (xd + k * xd * xd * xd))));
  };
  auto deriv = [](S x, S) {
    double xd = x;
    double t = std::tanh(c * (xd + k * xd * xd * xd));
    return static_cast<S>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * c * (1.0 + 3.0 * k * xd * xd));
  };
  return detail::unary<S>("gelu", a, fwd, deriv);
}

// Sum of all elements, returned as a rank-0 tensor.
template <std::floating_point S>
Tensor<S> sum(const Tensor<S>& a) {
  double acc = 0.0;
  for (auto v : a.data()) acc += v;
  return detail::make_result<S>("sum", {}, {static_cast<S>(acc)}, {a.node()}, [](detail::Node<S>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (auto& g : gp) g += self.grad[0];
  });
}

template <std::floating_point S>
Tensor<S> mean(const Tensor<S>& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double acc = 0.0;
  for (auto v : a.data()) acc += v;
  return detail::make_result<S>("mean", {}, {static_cast<S>(acc * inv)}, {a.node()},
                                [inv](detail::Node<S>& self) {
                                  auto& gp = self.parents[0]->ensure_grad();
                                  const S g = static_cast<S>(self.grad[0] * inv);
                                  for (auto& x : gp) x += g;
                                });
}

namespace detail {

template <std::floating_point S>
Tensor<S> reduce_axis(const char* op, const Tensor<S>& a, std::size_t axis, bool keepdim, double factor) {
  if (axis >= a.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(a.shape()));
  }
  auto sp = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  std::vector<double> acc(sp.outer * sp.inner, 0.0);
  auto ad = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) acc[o * sp.inner + i] += ad[(o * sp.len + l) * sp.inner + i];
  std::vector<S> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<S>(acc[i] * factor);
  return make_result<S>(op, std::move(out_shape), std::move(out), {a.node()}, [sp, factor](Node<S>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i)
          gp[(o * sp.len + l) * sp.inner + i] += static_cast<S>(self.grad[o * sp.inner + i] * factor);
  });
}

}  // namespace detail

template <std::floating_point S>
Tensor<S> sum(const Tensor<S>& a, std::size_t axis, bool keepdim = false) {
  return detail::reduce_axis("sum_axis", a, axis, keepdim, 1.0);
}

template <std::floating_point S>
Tensor<S> mean(const Tensor<S>& a, std::size_t axis, bool keepdim = false) {
  if (axis >= a.rank()) {
    throw DimensionError("mean_axis: axis " + std::to_string(axis) + " out of range for shape " + to_string(a.shape()));
  }
  return detail::reduce_axis("mean_axis", a, axis, keepdim, 1.0 / static_cast<double>(a.dim(axis)));
}

template <std::floating_point S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.numel()) detail::shape_mismatch("reshape", a.shape(), shape);
  auto data = std::vector<S>(a.data().begin(), a.data().end());
  return detail::make_result<S>("reshape", std::move(shape), std::move(data), {a.node()},
                                [](detail::Node<S>& self) {
                                  auto& gp = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
                                });
}

// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
template <std::floating_point S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() != 2 && a.rank() != 3) {
    throw DimensionError("transpose: expected rank 2 or 3, got shape " + to_string(a.shape()));
  }
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t rows = a.dim(a.rank() - 2), cols = a.dim(a.rank() - 1);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<S> out(a.numel());
  auto ad = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[b * rows * cols + j * rows + i] = ad[b * rows * cols + i * cols + j];
  return detail::make_result<S>("transpose", std::move(out_shape), std::move(out), {a.node()},
                                [batch, rows, cols](detail::Node<S>& self) {
                                  auto& gp = self.parents[0]->ensure_grad();
                                  for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t i = 0; i < rows; ++i)
                                      for (std::size_t j = 0; j < cols; ++j)
                                        gp[b * rows * cols + i * cols + j] += self.grad[b * rows * cols + j * rows + i];
                                });
}

// Matrix product. Supported forms: (M,K)x(K,N), (B,M,K)x(K,N) with a shared
// right operand, and batched (B,M,K)x(B,K,N).
template <std::floating_point S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  if (as.size() == 2 && bs.size() == 2 && as[1] == bs[0]) {
    m = as[0], k = as[1], n = bs[1];
  } else if (as.size() == 3 && bs.size() == 2 && as[2] == bs[0]) {
    m = as[0] * as[1], k = as[2], n = bs[1];
  } else if (as.size() == 3 && bs.size() == 3 && as[0] == bs[0] && as[2] == bs[1]) {
    batch = as[0], m = as[1], k = as[2], n = bs[2];
  } else {
    detail::shape_mismatch("matmul", as, bs);
  }
  Shape out_shape;
  if (as.size() == 2) {
    out_shape = {m, n};
  } else {
    out_shape = {as[0], as[1], n};
  }
  std::vector<S> out(batch * m * n);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t t = 0; t < batch; ++t) {
    linalg::gemm_nn<S>(ad.subspan(t * m * k, m * k), bd.subspan(t * k * n, k * n),
                       std::span<S>(out).subspan(t * m * n, m * n), m, k, n);
  }
  return detail::make_result<S>(
      "matmul", std::move(out_shape), std::move(out), {a.node(), b.node()}, [batch, m, k, n](detail::Node<S>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        std::span<const S> g = self.grad;
        for (std::size_t t = 0; t < batch; ++t) {
          auto gt = g.subspan(t * m * n, m * n);
          if (pa.requires_grad) {
            auto& ga = pa.ensure_grad();
            linalg::gemm_nt<S>(gt, std::span<const S>(pb.data).subspan(t * k * n, k * n),
                               std::span<S>(ga).subspan(t * m * k, m * k), m, n, k, true);
          }
          if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            linalg::gemm_tn<S>(std::span<const S>(pa.data).subspan(t * m * k, m * k), gt,
                               std::span<S>(gb).subspan(t * k * n, k * n), k, m, n, true);
          }
        }
      });
}

// Concatenation along `axis`; all other dims must agree.
template <std::floating_point S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for shape " + to_string(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != ref.size()) detail::shape_mismatch("concat", ref, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != ref[i]) detail::shape_mismatch("concat", ref, s);
    }
    out_shape[axis] += s[axis];
  }
  auto sp = detail::split_axis(out_shape, axis);
  std::vector<S> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  std::vector<std::shared_ptr<detail::Node<S>>> nodes;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis);
    auto pd = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * sp.len + off) * sp.inner));
    off += len;
    nodes.push_back(p.node());
  }
  return detail::make_result<S>("concat", std::move(out_shape), std::move(out), std::move(nodes),
                                [sp, offsets, axis](detail::Node<S>& self) {
                                  for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                    auto& p = *self.parents[k];
                                    if (!p.requires_grad) continue;
                                    auto& gp = p.ensure_grad();
                                    const std::size_t len = p.shape[axis];
                                    for (std::size_t o = 0; o < sp.outer; ++o)
                                      for (std::size_t i = 0; i < len * sp.inner; ++i)
                                        gp[o * len * sp.inner + i] +=
                                            self.grad[(o * sp.len + offsets[k]) * sp.inner + i];
                                  }
                                });
}

// Rows of a rank-2 tensor selected by index: out[i] = a[rows[i]].
template <std::floating_point S>
Tensor<S> gather(const Tensor<S>& a, std::span<const std::size_t> rows) {
  if (a.rank() != 2) throw DimensionError("gather: expected rank-2 input, got " + to_string(a.shape()));
  if (rows.empty()) throw ContractError("gather: empty index list");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<S> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) throw DimensionError("gather: index " + std::to_string(rows[i]) + " out of range " + std::to_string(r));
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return detail::make_result<S>("gather", {rows.size(), c}, std::move(out), {a.node()},
                                [idx, c](detail::Node<S>& self) {
                                  auto& gp = self.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (std::size_t j = 0; j < c; ++j) gp[idx[i] * c + j] += self.grad[i * c + j];
                                });
}

// Per-batch token selection: a (B,T,E), indices (B*K) row-major -> (B,K,E).
template <std::floating_point S>
Tensor<S> gather_tokens(const Tensor<S>& a, std::span<const std::size_t> indices, std::size_t k) {
  if (a.rank() != 3) throw DimensionError("gather_tokens: expected rank-3 input, got " + to_string(a.shape()));
  const std::size_t batch = a.dim(0), t = a.dim(1), e = a.dim(2);
  if (k == 0 || indices.size() != batch * k) {
    throw DimensionError("gather_tokens: expected " + std::to_string(batch) + "x" + std::to_string(k) +
                         " indices, got " + std::to_string(indices.size()));
  }
  std::vector<S> out(batch * k * e);
  auto ad = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t src = indices[b * k + i];
      if (src >= t) throw DimensionError("gather_tokens: index " + std::to_string(src) + " out of range " + std::to_string(t));
      std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>((b * t + src) * e), e,
                  out.begin() + static_cast<std::ptrdiff_t>((b * k + i) * e));
    }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return detail::make_result<S>("gather_tokens", {batch, k, e}, std::move(out), {a.node()},
                                [idx, batch, t, k, e](detail::Node<S>& self) {
                                  auto& gp = self.parents[0]->ensure_grad();
                                  for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t i = 0; i < k; ++i) {
                                      const std::size_t src = idx[b * k + i];
                                      for (std::size_t j = 0; j < e; ++j)
                                        gp[(b * t + src) * e + j] += self.grad[(b * k + i) * e + j];
                                    }
                                });
}

// Softmax along the last dimension. `keep` (optional) is either one flag per
// element or one per element of the trailing (rows, cols) matrix, broadcast
// over leading dims; masked entries come out exactly 0.
template <std::floating_point S>
Tensor<S> softmax(const Tensor<S>& a, std::span<const std::uint8_t> keep = {}) {
  if (a.rank() == 0) throw DimensionError("softmax: scalar input");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  std::size_t mask_period = 0;
  if (!keep.empty()) {
    if (keep.size() == a.numel()) {
      mask_period = a.numel();
    } else if (a.rank() >= 2 && keep.size() == a.dim(a.rank() - 2) * cols) {
      mask_period = keep.size();
    } else {
      throw DimensionError("softmax: mask of " + std::to_string(keep.size()) + " flags does not fit shape " +
                           to_string(a.shape()));
    }
  }
  std::vector<S> out(a.numel(), S(0));
  auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    auto kept = [&](std::size_t j) { return mask_period == 0 || keep[(base + j) % mask_period] != 0; };
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false, finite = true;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!kept(j)) continue;
      any = true;
      finite = finite && std::isfinite(ad[base + j]);
      mx = std::max(mx, static_cast<double>(ad[base + j]));
    }
    if (!any) throw ContractError("softmax: row " + std::to_string(r) + " is fully masked");
    if (!finite) {
      // left for the caller's loss check to report
      for (std::size_t j = 0; j < cols; ++j) out[base + j] = kept(j) ? std::numeric_limits<S>::quiet_NaN() : S(0);
      continue;
    }
    double z = 0.0;
    std::vector<double> e(cols, 0.0);
    for (std::size_t j = 0; j < cols; ++j)
      if (kept(j)) z += (e[j] = std::exp(static_cast<double>(ad[base + j]) - mx));
    for (std::size_t j = 0; j < cols; ++j) out[base + j] = kept(j) ? static_cast<S>(e[j] / z) : S(0);
  }
  return detail::make_result<S>("softmax", a.shape(), std::move(out), {a.node()},
                                [rows, cols](detail::Node<S>& self) {
                                  auto& gp = self.parents[0]->ensure_grad();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const std::size_t base = r * cols;
                                    double dot = 0.0;
                                    for (std::size_t j = 0; j < cols; ++j)
                                      dot += static_cast<double>(self.data[base + j]) * self.grad[base + j];
                                    for (std::size_t j = 0; j < cols; ++j)
                                      gp[base + j] += static_cast<S>(self.data[base + j] * (self.grad[base + j] - dot));
                                  }
                                });
}

// Mean cross-entropy of logits (B,K) against integer labels.
template <std::floating_point S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: expected (B,K) logits, got " + to_string(logits.shape()));
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  }
  std::vector<S> probs(batch * classes);
  double total = 0.0;
  auto ld = logits.data();
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[b]) + " outside [0, " +
                          std::to_string(classes) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, static_cast<double>(ld[b * classes + c]));
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(ld[b * classes + c] - mx);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = static_cast<S>(std::exp(ld[b * classes + c] - mx) / z);
    total += -(ld[b * classes + labels[b]] - mx - std::log(z));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result<S>("cross_entropy", {}, {static_cast<S>(total / static_cast<double>(batch))},
                                {logits.node()}, [probs = std::move(probs), lab, batch, classes](detail::Node<S>& self) {
                                  auto& gp = self.parents[0]->ensure_grad();
                                  const double g = self.grad[0] / static_cast<double>(batch);
                                  for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t c = 0; c < classes; ++c) {
                                      double target = static_cast<int>(c) == lab[b] ? 1.0 : 0.0;
                                      gp[b * classes + c] += static_cast<S>(g * (probs[b * classes + c] - target));
                                    }
                                });
}

// Matrix inverse of (N,N) or batched (B,N,N). Forward-only: the result never
// carries graph history, so it is only valid on constant (teacher) paths.
template <std::floating_point S>
Tensor<S> inverse(const Tensor<S>& a) {
  const auto& s = a.shape();
  if ((s.size() != 2 && s.size() != 3) || s[s.size() - 1] != s[s.size() - 2]) {
    throw DimensionError("inverse: expected square (N,N) or (B,N,N), got " + to_string(s));
  }
  const std::size_t n = s.back();
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  std::vector<S> out(a.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    auto inv = linalg::lu_inverse<S>(a.data().subspan(b * n * n, n * n), n);
    std::copy(inv.begin(), inv.end(), out.begin() + static_cast<std::ptrdiff_t>(b * n * n));
  }
  return Tensor<S>::from(s, std::move(out));
}

template <std::floating_point S>
Tensor<S> identity(std::size_t n) {
  auto t = Tensor<S>::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = S(1);
  return t;
}

}  // namespace rdcssl
