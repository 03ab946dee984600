#pragma once

#include <cstddef>
#include <optional>

#include "feanet/autograd.hpp"
#include "feanet/tensor.hpp"

namespace feanet::nn {

/// Geometry of a convolution or transposed convolution.
/// Conv:            h_out = (h + 2 * padding - kh) / stride + 1, division exact.
/// Transposed conv: h_out = (h - 1) * stride - 2 * padding + kh.
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kh = 3;
  std::size_t kw = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool has_bias = false;

  /// Output extent of a conv over `input`; throws on inexact division.
  Shape conv_output(const Shape& input) const;
  /// Output extent of a transposed conv over `input`.
  Shape transposed_output(const Shape& input) const;
};

enum class Mode { train, eval };
enum class PoolKind { max, avg };
enum class Activation { relu, sigmoid, softmax_channel };

// Differentiable operations. All validate shapes and throw
// std::invalid_argument naming the offending dimension.

/// weight: (out_channels, in_channels, kh, kw); bias: (1, out_channels, 1, 1).
Var conv2d(const Var& input, const ConvSpec& spec, const Var& weight,
           const std::optional<Var>& bias = std::nullopt);

/// weight: (in_channels, out_channels, kh, kw); bias: (1, out_channels, 1, 1).
/// This is the adjoint of conv2d with the same weight memory.
Var transposed_conv2d(const Var& input, const ConvSpec& spec, const Var& weight,
                      const std::optional<Var>& bias = std::nullopt);

struct BatchNormState {
  Tensor running_mean;  // (1, c, 1, 1)
  Tensor running_var;   // (1, c, 1, 1)
  double momentum = 0.1;
  double epsilon = 1e-5;

  explicit BatchNormState(std::size_t channels = 0);
};

/// Train mode normalizes with biased batch statistics and folds them into
/// the running estimates (unbiased variance); eval mode uses the running
/// estimates. gamma/beta: (1, c, 1, 1).
Var batchnorm2d(const Var& input, const Var& gamma, const Var& beta, Mode mode,
                BatchNormState& state);

/// Windowed pooling without padding. Max routes the gradient to the first
/// maximal element in row-major window order.
Var pool2d(const Var& input, PoolKind kind, std::size_t window, std::size_t stride);

/// Reduces each (h, w) plane to one value: (n, c, 1, 1).
Var global_pool(const Var& input, PoolKind kind);

/// Reduces across channels at every pixel: (n, 1, h, w).
Var channel_reduce(const Var& input, PoolKind kind);

/// Batched affine map y = W x + b. input: (n, in, 1, 1); weight:
/// (out, in, 1, 1); bias: (1, out, 1, 1).
Var dense(const Var& input, const Var& weight, const std::optional<Var>& bias = std::nullopt);

Var activation(const Var& input, Activation kind);
inline Var relu(const Var& x) { return activation(x, Activation::relu); }
inline Var sigmoid(const Var& x) { return activation(x, Activation::sigmoid); }
inline Var softmax_channel(const Var& x) { return activation(x, Activation::softmax_channel); }

Var add(const Var& a, const Var& b);
/// Elementwise product with broadcasting over any dimension of extent 1.
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
/// Stacks along the channel axis.
Var concat_channels(const Var& a, const Var& b);
/// Sum of all elements as a (1, 1, 1, 1) scalar.
Var sum(const Var& a);

namespace testing {
/// Fault injection for the gradient audit: when set, conv2d's input
/// gradient is deliberately perturbed.
void set_conv_backward_fault(bool enabled);
bool conv_backward_fault();
}  // namespace testing

}  // namespace feanet::nn
