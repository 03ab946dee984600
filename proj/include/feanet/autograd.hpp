#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "feanet/tensor.hpp"

namespace feanet {

namespace detail {
struct Node;
}

/// Handle to a value in the dynamic computation trace. Copies share the
/// underlying node. Leaves created with requires_grad collect gradients;
/// interior nodes exist only while some handle downstream keeps them alive.
class Var {
 public:
  Var() = default;
  static Var leaf(Tensor value, bool requires_grad = false);
  static Var constant(Tensor value) { return leaf(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const;
  /// Mutable access to the stored values, for optimizers and tests that
  /// perturb parameters in place. Never mutate a node inside a live trace.
  Tensor& mutable_value();
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool is_leaf() const;

  /// Gradient accumulated by backward(); empty span if none was produced.
  std::span<const double> grad() const;
  void zero_grad();

  /// Adds into this node's gradient slot, allocating it on first use.
  void accumulate_grad(std::span<const double> g) const;
  std::span<double> grad_buffer() const;

 private:
  friend Var record(Tensor, std::initializer_list<Var>,
                    std::function<void(std::span<const double>)>);
  friend void backward(const Var&);
  std::shared_ptr<detail::Node> node_;
};

using BackwardFn = std::function<void(std::span<const double> out_grad)>;

/// Creates the result node of an operation. When gradients are disabled or
/// no input requires them the result is a constant and `fn` is discarded.
/// `fn` receives the output gradient and must accumulate into its inputs.
Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

/// Reverse-mode accumulation from a scalar node. Leaf gradients add onto
/// whatever they already hold; interior gradients restart from zero.
void backward(const Var& loss);

/// True unless a NoGradGuard is active on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// |a - n| / max(1e-8, |a| + |n|), the comparison used by all gradient audits.
double relative_error(double analytic, double numeric);

/// Compares analytic gradients of a scalar-valued closure with central
/// differences, perturbing every element of every tensor in `wrt` in place.
/// Returns the maximum elementwise relative error.
double grad_check(const std::function<Var()>& loss_fn, std::span<const Var> wrt,
                  double step = 1e-5);

/// Single-input form: `op` maps the input to a scalar.
double grad_check(const std::function<Var(const Var&)>& op, const Tensor& input,
                  double step = 1e-5);

}  // namespace feanet
