#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "granmoe/tensor/tensor.hpp"

namespace granmoe {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW with decoupled weight decay. Only trainable entries are touched;
// moment buffers are keyed by parameter name so they survive checkpointing.
template <typename Scalar>
class BasicAdamW {
 public:
  using Mat = RowMatrix<Scalar>;

  struct Moments {
    Mat m;
    Mat v;
  };

  explicit BasicAdamW(AdamWOptions options = {}) : options_(options) {}

  void step(BasicParameterSet<Scalar>& params, Scalar lr) {
    ++t_;
    const Scalar bc1 = Scalar(1) - std::pow(Scalar(options_.beta1), Scalar(t_));
    const Scalar bc2 = Scalar(1) - std::pow(Scalar(options_.beta2), Scalar(t_));
    params.for_each([&](auto& e) {
      if (!e.trainable) return;
      auto& p = e.tensor.values();
      const Mat& g = e.tensor.grad();
      auto [it, fresh] = state_.try_emplace(e.name);
      if (fresh) {
        it->second.m = Mat::Zero(p.rows(), p.cols());
        it->second.v = Mat::Zero(p.rows(), p.cols());
      }
      Moments& s = it->second;
      s.m = Scalar(options_.beta1) * s.m + Scalar(1 - options_.beta1) * g;
      s.v = Scalar(options_.beta2) * s.v + Scalar(1 - options_.beta2) * g.cwiseProduct(g);
      p.array() -= lr * Scalar(options_.weight_decay) * p.array();
      p.array() -= lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + Scalar(options_.eps));
    });
  }

  long steps_taken() const noexcept { return t_; }
  void set_steps_taken(long t) noexcept { t_ = t; }
  const AdamWOptions& options() const noexcept { return options_; }
  std::map<std::string, Moments>& state() noexcept { return state_; }
  const std::map<std::string, Moments>& state() const noexcept { return state_; }

 private:
  AdamWOptions options_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

using AdamW = BasicAdamW<double>;

// Linear warmup over ceil(warmup_ratio * total_steps) steps, then cosine decay
// reaching exactly zero on the last step.
class CosineSchedule {
 public:
  CosineSchedule(double peak_lr, long total_steps, double warmup_ratio)
      : peak_(peak_lr), total_(total_steps), warmup_(static_cast<long>(std::ceil(warmup_ratio * total_steps))) {
    if (total_steps <= 0) throw DegenerateInputError("schedule needs at least one step");
    if (warmup_ >= total_) warmup_ = total_ - 1;
  }

  double lr(long step) const {
    if (step < warmup_) return peak_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
    const long span = total_ - warmup_;
    const double progress = static_cast<double>(step - warmup_ + 1) / static_cast<double>(span);
    return 0.5 * peak_ * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
  }

  long warmup_steps() const noexcept { return warmup_; }
  long total_steps() const noexcept { return total_; }

 private:
  double peak_;
  long total_;
  long warmup_;
};

// Scales trainable gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename Scalar>
Scalar clip_grad_norm(BasicParameterSet<Scalar>& params, Scalar max_norm) {
  Scalar sq = 0;
  params.for_each([&](auto& e) {
    if (e.trainable && e.tensor.has_grad()) sq += e.tensor.grad().squaredNorm();
  });
  const Scalar norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const Scalar f = max_norm / norm;
    params.for_each([&](auto& e) {
      if (e.trainable && e.tensor.has_grad()) e.tensor.grad() *= f;
    });
  }
  return norm;
}

}  // namespace granmoe
