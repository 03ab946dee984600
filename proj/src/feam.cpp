#include "feanet/feam.hpp"

#include <stdexcept>

namespace feanet::feam {

namespace {

nn::ConvSpec spatial_spec(std::size_t ks) {
  return {.in_channels = 2,
          .out_channels = 1,
          .kh = ks,
          .kw = ks,
          .stride = 1,
          .padding = (ks - 1) / 2,
          .has_bias = true};
}

Var shared_mlp(const Var& descriptor, const FeamParams& p) {
  return nn::dense(nn::relu(nn::dense(descriptor, p.mlp_w1)), p.mlp_w2);
}

}  // namespace

void FeamParams::collect(const std::string& prefix, nn::StateList& out) const {
  out.params.push_back({prefix + ".mlp_w1", mlp_w1});
  out.params.push_back({prefix + ".mlp_w2", mlp_w2});
  out.params.push_back({prefix + ".spatial_kernel", spatial_kernel});
  out.params.push_back({prefix + ".spatial_bias", spatial_bias});
}

void validate(std::size_t channels, std::size_t reduction, std::size_t kernel_size) {
  if (reduction == 0) throw std::invalid_argument("feam: reduction must be positive");
  if (channels == 0 || channels % reduction != 0) {
    throw std::invalid_argument("feam: channels " + std::to_string(channels) +
                                " not divisible by reduction " + std::to_string(reduction));
  }
  if (kernel_size % 2 == 0) {
    throw std::invalid_argument("feam: spatial kernel size " + std::to_string(kernel_size) +
                                " must be odd");
  }
}

FeamParams make_params(std::size_t channels, std::size_t reduction, std::size_t kernel_size,
                       Rng& rng) {
  validate(channels, reduction, kernel_size);
  FeamParams p;
  p.channels = channels;
  p.reduction = reduction;
  p.kernel_size = kernel_size;
  const std::size_t hidden = channels / reduction;
  p.mlp_w1 = Var::leaf(nn::init_uniform({hidden, channels, 1, 1}, channels, rng), true);
  p.mlp_w2 = Var::leaf(nn::init_uniform({channels, hidden, 1, 1}, hidden, rng), true);
  p.spatial_kernel = Var::leaf(
      nn::init_uniform({1, 2, kernel_size, kernel_size}, 2 * kernel_size * kernel_size, rng), true);
  p.spatial_bias = Var::leaf(Tensor({1, 1, 1, 1}, 0.0), true);
  return p;
}

FeamParams zero_params(std::size_t channels, std::size_t reduction, std::size_t kernel_size) {
  validate(channels, reduction, kernel_size);
  FeamParams p;
  p.channels = channels;
  p.reduction = reduction;
  p.kernel_size = kernel_size;
  const std::size_t hidden = channels / reduction;
  p.mlp_w1 = Var::leaf(Tensor({hidden, channels, 1, 1}, 0.0), true);
  p.mlp_w2 = Var::leaf(Tensor({channels, hidden, 1, 1}, 0.0), true);
  p.spatial_kernel = Var::leaf(Tensor({1, 2, kernel_size, kernel_size}, 0.0), true);
  p.spatial_bias = Var::leaf(Tensor({1, 1, 1, 1}, 0.0), true);
  return p;
}

Var channel_attention(const Var& x, const FeamParams& p) {
  if (x.shape().c != p.channels) {
    throw std::invalid_argument("feam::channel_attention: input has " +
                                std::to_string(x.shape().c) + " channels, module expects " +
                                std::to_string(p.channels));
  }
  Var avg = shared_mlp(nn::global_pool(x, nn::PoolKind::avg), p);
  Var max = shared_mlp(nn::global_pool(x, nn::PoolKind::max), p);
  return nn::sigmoid(nn::add(avg, max));
}

Var spatial_attention(const Var& x, const FeamParams& p) {
  Var stacked = nn::concat_channels(nn::channel_reduce(x, nn::PoolKind::avg),
                                    nn::channel_reduce(x, nn::PoolKind::max));
  return nn::sigmoid(
      nn::conv2d(stacked, spatial_spec(p.kernel_size), p.spatial_kernel, p.spatial_bias));
}

Var feam_apply(const Var& x, const FeamParams& p) {
  Var refined = nn::mul(x, channel_attention(x, p));
  return nn::mul(refined, spatial_attention(refined, p));
}

}  // namespace feanet::feam
