#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "rdcssl/error.hpp"

// Dense kernels over row-major spans. Inner products and reductions accumulate
// in double regardless of the storage type.
namespace rdcssl::linalg {

// C (M,N) = A (M,K) * B (K,N); C += when accumulate.
template <std::floating_point S>
void gemm_nn(std::span<const S> a, std::span<const S> b, std::span<S> c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false) {
  std::vector<double> bd(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(k * n));
  std::vector<double> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    const S* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
    S* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<S>((accumulate ? crow[j] : 0.0) + row[j]);
  }
}

// C (M,N) = A (M,K) * B^T where B is (N,K). B is transposed once so the
// inner loop runs over contiguous columns.
template <std::floating_point S>
void gemm_nt(std::span<const S> a, std::span<const S> b, std::span<S> c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  std::vector<double> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    const S* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = bt.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
    S* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<S>((accumulate ? crow[j] : 0.0) + row[j]);
  }
}

// C (M,N) = A^T * B where A is (K,M) and B is (K,N).
template <std::floating_point S>
void gemm_tn(std::span<const S> a, std::span<const S> b, std::span<S> c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate = false) {
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const S* arow = a.data() + p * m;
    const S* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* dst = acc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += av * static_cast<double>(brow[j]);
    }
  }
  for (std::size_t i = 0; i < m * n; ++i) c[i] = static_cast<S>((accumulate ? c[i] : 0.0) + acc[i]);
}

inline double norm1(std::span<const double> a, std::size_t n) {
  double best = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < n; ++i) col += std::abs(a[i * n + j]);
    best = std::max(best, col);
  }
  return best;
}

// Inverse of an n x n matrix by LU decomposition with partial pivoting,
// computed in double. Throws SingularityError when a pivot vanishes relative
// to the matrix scale; the attached estimate is max|pivot| / min|pivot|.
template <std::floating_point S>
std::vector<S> lu_inverse(std::span<const S> input, std::size_t n) {
  std::vector<double> lu(input.begin(), input.end());
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;

  double scale = 0.0;
  for (double v : lu) scale = std::max(scale, std::abs(v));
  const double tol = static_cast<double>(n) * std::numeric_limits<double>::epsilon() * std::max(scale, 1e-300);

  double max_pivot = 0.0;
  double min_pivot = std::numeric_limits<double>::infinity();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    double best = std::abs(lu[col * n + col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      double v = std::abs(lu[r * n + col]);
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    max_pivot = std::max(max_pivot, best);
    min_pivot = std::min(min_pivot, best);
    if (best <= tol) {
      double estimate = best > 0.0 ? max_pivot / best : std::numeric_limits<double>::infinity();
      throw SingularityError("inverse: matrix is singular to working precision (pivot " + std::to_string(best) +
                                 " at column " + std::to_string(col) + ", condition estimate " +
                                 std::to_string(estimate) + ")",
                             estimate);
    }
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu[col * n + j], lu[piv * n + j]);
      std::swap(perm[col], perm[piv]);
    }
    const double d = lu[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      double f = lu[r * n + col] / d;
      lu[r * n + col] = f;
      if (f == 0.0) continue;
      for (std::size_t j = col + 1; j < n; ++j) lu[r * n + j] -= f * lu[col * n + j];
    }
  }

  // Solve LU x = P e_j column by column.
  std::vector<double> inv(n * n, 0.0);
  std::vector<double> x(n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) x[i] = perm[i] == j ? 1.0 : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = x[i];
      for (std::size_t p = 0; p < i; ++p) s -= lu[i * n + p] * x[p];
      x[i] = s;
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = x[ii];
      for (std::size_t p = ii + 1; p < n; ++p) s -= lu[ii * n + p] * x[p];
      x[ii] = s / lu[ii * n + ii];
    }
    for (std::size_t i = 0; i < n; ++i) inv[i * n + j] = x[i];
  }
  return std::vector<S>(inv.begin(), inv.end());
}

}  // namespace rdcssl::linalg
