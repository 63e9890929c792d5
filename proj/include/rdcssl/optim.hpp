#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "rdcssl/tensor.hpp"

namespace rdcssl {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

// Adam with decoupled weight decay. Decay is skipped for rank-1 parameters
// (biases, mask token).
template <std::floating_point S>
class AdamW {
 public:
  AdamW(std::vector<Tensor<S>> params, AdamWOptions options) : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      first_.emplace_back(p.numel(), 0.0);
      second_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto x = p.mutable_data();
      auto g = p.grad();
      const bool decay = p.rank() >= 2 && options_.weight_decay > 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        double xi = x[i];
        if (decay) xi -= lr * options_.weight_decay * xi;
        auto& m = first_[k][i];
        auto& v = second_[k][i];
        m = options_.beta1 * m + (1.0 - options_.beta1) * g[i];
        v = options_.beta2 * v + (1.0 - options_.beta2) * static_cast<double>(g[i]) * g[i];
        xi -= lr * (m / c1) / (std::sqrt(v / c2) + options_.eps);
        x[i] = static_cast<S>(xi);
      }
    }
  }

  std::size_t steps() const { return steps_; }

 private:
  std::vector<Tensor<S>> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> first_, second_;
  std::size_t steps_ = 0;
};

struct LrSchedule {
  double peak = 0.00015;
  std::size_t warmup_epochs = 40;
  std::size_t total_epochs = 300;
};

// Linear warmup from 0 to the peak over warmup_epochs, then half-cosine decay
// toward 0 across the remaining epochs. Accepts fractional epochs so the
// training loop can update per step.
inline double lr_schedule(double epoch, const LrSchedule& s) {
  const double warm = static_cast<double>(s.warmup_epochs);
  if (epoch < warm) return s.peak * epoch / warm;
  const double span = static_cast<double>(s.total_epochs) - warm;
  const double progress = span > 0.0 ? std::min(1.0, (epoch - warm) / span) : 1.0;
  return s.peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace rdcssl
