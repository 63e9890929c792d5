#pragma once

#include <string>

#include "rdcssl/ops.hpp"

// Wasserstein-distance knowledge distillation between diagonal Gaussians
// fitted to teacher and student feature maps.
namespace rdcssl {

// l x d feature matrix: column i is the l-dim feature at spatial/token position i.
template <std::floating_point S>
struct FeatureMatrix {
  Tensor<S> values;  // (l, d)

  std::size_t channels() const { return values.dim(0); }
  std::size_t positions() const { return values.dim(1); }
};

// Mean and per-channel standard deviation; shapes (l) for one feature map or
// (B, l) for a batch.
template <std::floating_point S>
struct GaussianMoments {
  Tensor<S> mean;
  Tensor<S> stddev;
};

struct TokenLayout {
  std::size_t height = 1, width = 1;
  std::size_t positions() const { return height * width; }
};

inline constexpr double kStddevEpsilon = 1e-12;

// tokens (T, E) arranged on an (h, w) grid -> F (E, T).
template <std::floating_point S>
FeatureMatrix<S> tokens_to_feature_matrix(const Tensor<S>& tokens, TokenLayout layout) {
  if (tokens.rank() != 2) throw DimensionError("tokens_to_feature_matrix: expected (T,E), got " + to_string(tokens.shape()));
  if (tokens.dim(0) != layout.positions()) {
    throw DimensionError("tokens_to_feature_matrix: layout " + std::to_string(layout.height) + "x" +
                         std::to_string(layout.width) + " does not cover " + std::to_string(tokens.dim(0)) + " tokens");
  }
  return {transpose(tokens)};
}

template <std::floating_point S>
Tensor<S> feature_matrix_to_tokens(const FeatureMatrix<S>& f) {
  return transpose(f.values);
}

// Population moments over the d columns: mu = mean_i f_i,
// delta_c = sqrt(var_c + eps).
template <std::floating_point S>
GaussianMoments<S> estimate_moments(const FeatureMatrix<S>& f) {
  auto mu = mean(f.values, 1, true);                  // (l, 1)
  auto var = mean(square(sub(f.values, mu)), 1);      // (l)
  return {reshape(mu, {f.channels()}), sqrt(add_scalar(var, static_cast<S>(kStddevEpsilon)))};
}

// Same moments for a token batch (B, T, E), taken over the token axis.
template <std::floating_point S>
GaussianMoments<S> estimate_batch_moments(const Tensor<S>& tokens) {
  if (tokens.rank() != 3) throw DimensionError("estimate_batch_moments: expected (B,T,E), got " + to_string(tokens.shape()));
  auto mu = mean(tokens, 1, true);                    // (B, 1, E)
  auto var = mean(square(sub(tokens, mu)), 1);        // (B, E)
  return {reshape(mu, {tokens.dim(0), tokens.dim(2)}), sqrt(add_scalar(var, static_cast<S>(kStddevEpsilon)))};
}

// gamma * ||mu_T - mu_S||^2 + ||delta_T - delta_S||^2. For batched moments
// (B, l) the per-element losses are averaged over B. Only the student side
// is expected to carry gradient.
template <std::floating_point S>
Tensor<S> wkd_loss(const GaussianMoments<S>& teacher, const GaussianMoments<S>& student, S gamma) {
  if (!(gamma >= S(0))) throw ConfigError("wkd_loss: gamma must be >= 0");
  if (teacher.mean.shape() != student.mean.shape() || teacher.stddev.shape() != student.stddev.shape() ||
      teacher.mean.shape() != teacher.stddev.shape()) {
    throw DimensionError("wkd_loss: teacher moments " + to_string(teacher.mean.shape()) + " vs student " +
                         to_string(student.mean.shape()));
  }
  auto mean_term = sum(square(sub(teacher.mean, student.mean)));
  auto cov_term = sum(square(sub(teacher.stddev, student.stddev)));
  auto total = add(scale(mean_term, gamma), cov_term);
  if (teacher.mean.rank() == 2) total = scale(total, static_cast<S>(1.0 / static_cast<double>(teacher.mean.dim(0))));
  return total;
}

}  // namespace rdcssl
