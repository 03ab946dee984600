#include "feanet/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "feanet/nn.hpp"

namespace feanet::optim {

Tensor one_hot(std::span<const int> labels, Shape shape) {
  const std::size_t plane = shape.plane();
  if (labels.size() != shape.n * plane) {
    throw std::invalid_argument("one_hot: " + std::to_string(labels.size()) +
                                " labels for volume " + shape.str());
  }
  Tensor t(shape, 0.0);
  for (std::size_t n = 0; n < shape.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      const int label = labels[n * plane + i];
      if (label < 0 || static_cast<std::size_t>(label) >= shape.c) {
        throw std::invalid_argument("one_hot: label " + std::to_string(label) +
                                    " outside [0, " + std::to_string(shape.c) + ")");
      }
      t[(n * shape.c + static_cast<std::size_t>(label)) * plane + i] = 1.0;
    }
  }
  return t;
}

Var dice_loss(const Var& pred, const Tensor& target, double epsilon) {
  const Shape& s = pred.shape();
  if (!(target.shape() == s)) {
    throw std::invalid_argument("dice_loss: prediction " + s.str() + " and target " +
                                target.shape().str() + " differ");
  }
  const std::size_t plane = s.plane();
  std::vector<double> inter(s.c, 0.0), denom(s.c, 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (n * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double p = pred.value()[base + i];
        const double g = target[base + i];
        inter[c] += p * g;
        denom[c] += p * p + g * g;
      }
    }
  }
  double loss = 0.0;
  for (std::size_t c = 0; c < s.c; ++c) {
    loss += 1.0 - (2.0 * inter[c] + epsilon) / (denom[c] + epsilon);
  }
  loss /= static_cast<double>(s.c);

  return record(Tensor({1, 1, 1, 1}, loss), {pred},
                [=, target = target](std::span<const double> g) {
    auto dp = pred.grad_buffer();
    const double scale = g[0] / static_cast<double>(s.c);
    for (std::size_t c = 0; c < s.c; ++c) {
      const double d = denom[c] + epsilon;
      const double num = 2.0 * inter[c] + epsilon;
      for (std::size_t n = 0; n < s.n; ++n) {
        const std::size_t base = (n * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double p = pred.value()[base + i];
          const double t = target[base + i];
          dp[base + i] -= scale * (2.0 * t * d - num * 2.0 * p) / (d * d);
        }
      }
    }
  });
}

Var soft_cross_entropy(const Var& pred, std::span<const int> labels, double log_floor,
                       double label_smoothing) {
  const Shape& s = pred.shape();
  const std::size_t plane = s.plane();
  if (labels.size() != s.n * plane) {
    throw std::invalid_argument("soft_cross_entropy: " + std::to_string(labels.size()) +
                                " labels for prediction " + s.str());
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw std::invalid_argument("soft_cross_entropy: label_smoothing must lie in [0, 1)");
  }
  const double off = label_smoothing / static_cast<double>(s.c);
  const double on = 1.0 - label_smoothing + off;
  const double norm = 1.0 / static_cast<double>(s.n * plane);
  std::vector<int> owned(labels.begin(), labels.end());

  double loss = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      const int label = owned[n * plane + i];
      if (label < 0 || static_cast<std::size_t>(label) >= s.c) {
        throw std::invalid_argument("soft_cross_entropy: label " + std::to_string(label) +
                                    " outside [0, " + std::to_string(s.c) + ")");
      }
      for (std::size_t c = 0; c < s.c; ++c) {
        const double weight = static_cast<std::size_t>(label) == c ? on : off;
        if (weight == 0.0) continue;
        const double p = pred.value()[(n * s.c + c) * plane + i];
        loss -= weight * std::log(std::max(p, log_floor));
      }
    }
  }
  loss *= norm;

  return record(Tensor({1, 1, 1, 1}, loss), {pred},
                [=, owned = std::move(owned)](std::span<const double> g) {
    auto dp = pred.grad_buffer();
    for (std::size_t n = 0; n < s.n; ++n) {
      for (std::size_t i = 0; i < plane; ++i) {
        const auto label = static_cast<std::size_t>(owned[n * plane + i]);
        for (std::size_t c = 0; c < s.c; ++c) {
          const double weight = label == c ? on : off;
          const std::size_t k = (n * s.c + c) * plane + i;
          const double p = pred.value()[k];
          if (weight == 0.0 || p <= log_floor) continue;
          dp[k] -= g[0] * norm * weight / p;
        }
      }
    }
  });
}

Var combined_loss(const Var& pred, std::span<const int> labels, const LossOptions& opts) {
  Var dice = dice_loss(pred, one_hot(labels, pred.shape()), opts.dice_epsilon);
  Var ce = soft_cross_entropy(pred, labels, opts.log_floor, opts.label_smoothing);
  return nn::add(nn::scale(dice, 0.5), nn::scale(ce, 0.5));
}

double cosine_lr(double t_cur, double t_i, double lr_min, double lr_max) {
  const double mix = 0.5 * (1.0 + std::cos(std::numbers::pi * t_cur / t_i));
  return lr_min * (1.0 - mix) + lr_max * mix;
}

CosineWarmRestarts::CosineWarmRestarts(double lr_max, std::size_t t0, std::size_t t_mult,
                                       double lr_min)
    : lr_max_(lr_max), t0_(t0), t_mult_(t_mult), lr_min_(lr_min) {
  if (t0 == 0) throw std::invalid_argument("CosineWarmRestarts: T_0 must be positive");
  if (t_mult == 0) throw std::invalid_argument("CosineWarmRestarts: T_mult must be >= 1");
  if (lr_min < 0.0 || lr_min > lr_max) {
    throw std::invalid_argument("CosineWarmRestarts: need 0 <= lr_min <= lr_max");
  }
}

CosineWarmRestarts::Phase CosineWarmRestarts::phase(std::size_t step) const {
  std::size_t t_i = t0_;
  std::size_t t_cur = step;
  while (t_cur >= t_i) {
    t_cur -= t_i;
    t_i *= t_mult_;
  }
  return {t_cur, t_i};
}

double CosineWarmRestarts::lr(std::size_t step) const {
  const Phase p = phase(step);
  return cosine_lr(static_cast<double>(p.t_cur), static_cast<double>(p.t_i), lr_min_, lr_max_);
}

std::vector<std::size_t> CosineWarmRestarts::restart_instants(std::size_t count) const {
  std::vector<std::size_t> out;
  std::size_t t = 0;
  std::size_t t_i = t0_;
  for (std::size_t k = 0; k < count; ++k) {
    t += t_i;
    out.push_back(t);
    t_i *= t_mult_;
  }
  return out;
}

Sgd::Sgd(std::vector<Var> params, const SgdConfig& config)
    : params_(std::move(params)),
      config_(config),
      schedule_(config.lr_max, config.t0, config.t_mult, config.lr_min) {
  for (const auto& p : params_) velocity_.emplace_back(p.value().size(), 0.0);
}

void Sgd::step() { step_with_lr(schedule_.lr(steps_)); }

void Sgd::step_with_lr(double lr) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto theta = params_[k].mutable_value().values();
    const auto grad = params_[k].grad();
    auto& v = velocity_[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = (grad.empty() ? 0.0 : grad[i]) + config_.weight_decay * theta[i];
      v[i] = config_.momentum * v[i] + g;
      theta[i] -= lr * v[i];
    }
  }
  ++steps_;
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace feanet::optim
