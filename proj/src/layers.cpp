#include "feanet/layers.hpp"

#include <algorithm>
#include <cmath>

namespace feanet::nn {

std::size_t StateList::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params) total += p.var.value().size();
  return total;
}

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  return random_tensor(shape, rng, -bound, bound);
}

Conv2d::Conv2d(const ConvSpec& spec, bool transposed, Rng& rng)
    : spec_(spec), transposed_(transposed) {
  if (transposed) {
    const std::size_t taps = std::max<std::size_t>(spec.kh * spec.kw / (spec.stride * spec.stride), 1);
    weight = Var::leaf(init_uniform({spec.in_channels, spec.out_channels, spec.kh, spec.kw},
                                    spec.in_channels * taps, rng),
                       true);
  } else {
    weight = Var::leaf(init_uniform({spec.out_channels, spec.in_channels, spec.kh, spec.kw},
                                    spec.in_channels * spec.kh * spec.kw, rng),
                       true);
  }
  if (spec.has_bias) bias = Var::leaf(Tensor({1, spec.out_channels, 1, 1}, 0.0), true);
}

Var Conv2d::operator()(const Var& x) const {
  return transposed_ ? transposed_conv2d(x, spec_, weight, bias) : conv2d(x, spec_, weight, bias);
}

void Conv2d::zero_weights() {
  for (auto& v : weight.mutable_value().values()) v = 0.0;
  if (bias) {
    for (auto& v : bias->mutable_value().values()) v = 0.0;
  }
}

void Conv2d::collect(const std::string& prefix, StateList& out) const {
  out.params.push_back({prefix + ".weight", weight});
  if (bias) out.params.push_back({prefix + ".bias", *bias});
}

BatchNorm2d::BatchNorm2d(std::size_t channels)
    : gamma(Var::leaf(Tensor({1, channels, 1, 1}, 1.0), true)),
      beta(Var::leaf(Tensor({1, channels, 1, 1}, 0.0), true)),
      state(channels) {}

Var BatchNorm2d::operator()(const Var& x, Mode mode) {
  return batchnorm2d(x, gamma, beta, mode, state);
}

void BatchNorm2d::collect(const std::string& prefix, StateList& out) {
  out.params.push_back({prefix + ".gamma", gamma});
  out.params.push_back({prefix + ".beta", beta});
  out.buffers.push_back({prefix + ".running_mean", &state.running_mean});
  out.buffers.push_back({prefix + ".running_var", &state.running_var});
}

}  // namespace feanet::nn
