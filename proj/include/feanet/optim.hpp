#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "feanet/autograd.hpp"

namespace feanet::optim {

/// (n, classes, h, w) indicator volume; labels are (n, h, w) row-major.
/// Throws on labels outside [0, classes).
Tensor one_hot(std::span<const int> labels, Shape shape);

/// Soft Dice over a per-class probability volume:
///   1 - (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)
/// with sums over the whole batch volume of one class, averaged over
/// classes. The eps in the numerator makes an absent, unpredicted class
/// score 0 instead of 1.
Var dice_loss(const Var& pred, const Tensor& target, double epsilon = 1e-7);

/// Cross-entropy against class indices, averaged over batch and pixels:
///   -1/(n*h*w) sum_pixels sum_classes y_hat log(max(p, log_floor))
/// y_hat is the one-hot indicator, optionally smoothed toward uniform.
Var soft_cross_entropy(const Var& pred, std::span<const int> labels, double log_floor = 1e-12,
                       double label_smoothing = 0.0);

struct LossOptions {
  double dice_epsilon = 1e-7;
  double log_floor = 1e-12;
  double label_smoothing = 0.0;
};

/// 0.5 * dice_loss + 0.5 * soft_cross_entropy on probabilities `pred`.
Var combined_loss(const Var& pred, std::span<const int> labels, const LossOptions& opts = {});

/// Learning rate at position `t_cur` of a period of length `t_i`:
/// lr_min + (lr_max - lr_min) * (1 + cos(pi * t_cur / t_i)) / 2, evaluated as a
/// convex combination so both endpoints are exact.
double cosine_lr(double t_cur, double t_i, double lr_min, double lr_max);

/// Cosine annealing with warm restarts. Periods have lengths T_0,
/// T_0*T_mult, T_0*T_mult^2, ...; the rate starts each period at lr_max and
/// decays toward lr_min, which it reaches exactly at the period's end, where
/// the next period restarts at lr_max.
class CosineWarmRestarts {
 public:
  struct Phase {
    std::size_t t_cur;
    std::size_t t_i;
  };

  CosineWarmRestarts(double lr_max = 0.03, std::size_t t0 = 50, std::size_t t_mult = 2,
                     double lr_min = 1e-4);

  Phase phase(std::size_t step) const;
  double lr(std::size_t step) const;
  /// Steps at which a new period begins (cumulative period lengths).
  std::vector<std::size_t> restart_instants(std::size_t count) const;

  double lr_max() const { return lr_max_; }
  double lr_min() const { return lr_min_; }

 private:
  double lr_max_;
  std::size_t t0_;
  std::size_t t_mult_;
  double lr_min_;
};

struct SgdConfig {
  double lr_max = 0.03;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t t0 = 50;
  std::size_t t_mult = 2;
  double lr_min = 1e-4;
};

/// SGD with heavy-ball momentum on the weight-decayed gradient:
///   g' = g + wd * theta;  v = momentum * v + g';  theta -= lr(t) * v.
class Sgd {
 public:
  Sgd(std::vector<Var> params, const SgdConfig& config = {});

  /// Applies one update with the scheduled rate and advances the step count.
  void step();
  /// Applies one update with an explicit rate; the step count still advances.
  void step_with_lr(double lr);
  void zero_grad();

  std::size_t steps_taken() const { return steps_; }
  double current_lr() const { return schedule_.lr(steps_); }
  const CosineWarmRestarts& schedule() const { return schedule_; }
  const std::vector<std::vector<double>>& velocity() const { return velocity_; }

 private:
  std::vector<Var> params_;
  SgdConfig config_;
  CosineWarmRestarts schedule_;
  std::vector<std::vector<double>> velocity_;
  std::size_t steps_ = 0;
};

}  // namespace feanet::optim
