#pragma once

#include <cstddef>
#include <string>

#include "feanet/autograd.hpp"
#include "feanet/layers.hpp"

namespace feanet::feam {

/// Learnable state of one feature-enhanced attention module.
///
/// Channel stage: a shared two-layer MLP (c -> c/r -> c, ReLU between, no
/// biases) applied to the global average- and max-pooled descriptors; the
/// two outputs are summed and squashed by a sigmoid.
/// Spatial stage: channel-wise mean and max maps are stacked into a
/// 2-channel image and convolved with a ks x ks kernel (with bias,
/// padding (ks-1)/2), then squashed by a sigmoid.
struct FeamParams {
  std::size_t channels = 0;
  std::size_t reduction = 4;
  std::size_t kernel_size = 7;
  Var mlp_w1;          // (c/r, c, 1, 1), dense layout (out, in)
  Var mlp_w2;          // (c, c/r, 1, 1)
  Var spatial_kernel;  // (1, 2, ks, ks)
  Var spatial_bias;    // (1, 1, 1, 1)

  std::size_t hidden() const { return channels / reduction; }
  void collect(const std::string& prefix, nn::StateList& out) const;
};

/// Validates c % r == 0, r > 0 and odd ks; throws std::invalid_argument.
void validate(std::size_t channels, std::size_t reduction, std::size_t kernel_size);

/// Fan-in uniform initialization of all four tensors from `rng`.
FeamParams make_params(std::size_t channels, std::size_t reduction, std::size_t kernel_size,
                       Rng& rng);
/// All-zero parameters: both gates evaluate to exactly 0.5.
FeamParams zero_params(std::size_t channels, std::size_t reduction, std::size_t kernel_size);

/// sigmoid(MLP(avgpool(x)) + MLP(maxpool(x))): (n, c, 1, 1).
Var channel_attention(const Var& x, const FeamParams& p);
/// sigmoid(conv([mean_c(x); max_c(x)])): (n, 1, h, w).
Var spatial_attention(const Var& x, const FeamParams& p);
/// Channel gate first, then the spatial gate on the re-weighted map.
Var feam_apply(const Var& x, const FeamParams& p);

}  // namespace feanet::feam
