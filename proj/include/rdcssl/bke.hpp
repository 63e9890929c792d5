#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rdcssl/ops.hpp"
#include "rdcssl/wkd.hpp"

// Batch knowledge ensemble: token affinities between replayed teacher
// features and live student features, propagation of teacher knowledge over
// those affinities, and the resulting feature-distillation loss.
//
// Everything on the teacher side is a constant target. Affinities are built
// from detached student features, so the only gradient path into the student
// is through the moment terms of loss_fd.
namespace rdcssl {

namespace detail {

template <std::floating_point S>
void check_token_batch(const char* op, const Tensor<S>& t) {
  if (t.rank() != 3) throw DimensionError(std::string(op) + ": expected (B,T,E) tokens, got " + to_string(t.shape()));
}

template <std::floating_point S>
Tensor<S> l2_normalize_tokens(const Tensor<S>& t, const char* role) {
  const std::size_t batch = t.dim(0), tokens = t.dim(1), e = t.dim(2);
  std::vector<S> out(t.numel());
  auto d = t.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < tokens; ++i) {
      const std::size_t base = (b * tokens + i) * e;
      double sq = 0.0;
      for (std::size_t k = 0; k < e; ++k) sq += static_cast<double>(d[base + k]) * d[base + k];
      const double norm = std::sqrt(sq);
      if (!(norm > 0.0) || !std::isfinite(norm)) {
        throw NormalizationError(std::string("similarity_matrix: zero-norm ") + role + " token at (b=" + std::to_string(b) +
                           ", token=" + std::to_string(i) + ")");
      }
      for (std::size_t k = 0; k < e; ++k) out[base + k] = static_cast<S>(d[base + k] / norm);
    }
  return Tensor<S>::from(t.shape(), std::move(out));
}

inline void check_omega(double omega) {
  if (!(omega >= 0.0 && omega <= 1.0)) {
    throw ConfigError("bke: omega must lie in (0, 1), got " + std::to_string(omega), "/train/omega");
  }
}

}  // namespace detail

// A_b[i][j] = <teacher_b,i / |teacher_b,i|, student_b,j / |student_b,j|>, (B,T,T).
template <std::floating_point S>
Tensor<S> similarity_matrix(const Tensor<S>& teacher, const Tensor<S>& student) {
  detail::check_token_batch("similarity_matrix", teacher);
  detail::check_token_batch("similarity_matrix", student);
  if (teacher.shape() != student.shape()) {
    throw DimensionError("similarity_matrix: teacher " + to_string(teacher.shape()) + " vs student " +
                         to_string(student.shape()));
  }
  auto t_hat = detail::l2_normalize_tokens(teacher.detach(), "teacher");
  auto s_hat = detail::l2_normalize_tokens(student.detach(), "student");
  return matmul(t_hat, transpose(s_hat));
}

// Zeroes the diagonal, then softmax over j != i in each row. Diagonals stay 0.
template <std::floating_point S>
Tensor<S> normalize_affinity(const Tensor<S>& raw) {
  detail::check_token_batch("normalize_affinity", raw);
  const std::size_t t = raw.dim(1);
  if (raw.dim(2) != t) throw DimensionError("normalize_affinity: expected (B,T,T), got " + to_string(raw.shape()));
  if (t < 2) throw ContractError("normalize_affinity: degenerate affinity, need T >= 2 tokens (got " + std::to_string(t) + ")");
  std::vector<std::uint8_t> off_diagonal(t * t, 1);
  for (std::size_t i = 0; i < t; ++i) off_diagonal[i * t + i] = 0;
  return softmax(raw.detach(), off_diagonal);
}

// Q_(t) = omega * A_hat Q_(t-1) + (1 - omega) P, Q_(0) = P, per batch element.
template <std::floating_point S>
Tensor<S> propagate_iterative(const Tensor<S>& affinity, const Tensor<S>& teacher, double omega, std::size_t steps) {
  detail::check_omega(omega);
  detail::check_token_batch("propagate_iterative", teacher);
  const auto p = teacher.detach();
  auto base = scale(p, static_cast<S>(1.0 - omega));
  auto q = p;
  for (std::size_t i = 0; i < steps; ++i) q = add(scale(matmul(affinity, q), static_cast<S>(omega)), base);
  return q;
}

// Q^T = (1 - omega) (I - omega A_hat)^{-1} P, per batch element. The limit of
// propagate_iterative as steps -> infinity.
template <std::floating_point S>
Tensor<S> ensemble_closed_form(const Tensor<S>& affinity, const Tensor<S>& teacher, double omega) {
  detail::check_omega(omega);
  detail::check_token_batch("ensemble_closed_form", teacher);
  const std::size_t t = affinity.dim(1);
  auto system = sub(identity<S>(t), scale(affinity.detach(), static_cast<S>(omega)));
  return scale(matmul(inverse(system), teacher.detach()), static_cast<S>(1.0 - omega));
}

// Affinity + closed-form ensemble in one call: the teacher target for loss_fd.
template <std::floating_point S>
Tensor<S> ensemble_teacher(const Tensor<S>& teacher, const Tensor<S>& student, double omega) {
  return ensemble_closed_form(normalize_affinity(similarity_matrix(teacher, student)), teacher, omega);
}

// WKD loss between moments of the ensembled teacher Q^T and the student
// tokens, each batch element on an (h, w) token layout, averaged over B.
template <std::floating_point S>
Tensor<S> loss_fd(const Tensor<S>& teacher_target, const Tensor<S>& student, S gamma, TokenLayout layout) {
  detail::check_token_batch("loss_fd", student);
  if (teacher_target.requires_grad()) throw ContractError("loss_fd: teacher target must be gradient-stopped");
  if (teacher_target.shape() != student.shape()) {
    throw DimensionError("loss_fd: teacher " + to_string(teacher_target.shape()) + " vs student " +
                         to_string(student.shape()));
  }
  if (student.dim(1) != layout.positions()) {
    throw DimensionError("loss_fd: layout " + std::to_string(layout.height) + "x" + std::to_string(layout.width) +
                         " does not cover " + std::to_string(student.dim(1)) + " tokens");
  }
  return wkd_loss(estimate_batch_moments(teacher_target), estimate_batch_moments(student), gamma);
}

}  // namespace rdcssl
