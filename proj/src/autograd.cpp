#include "feanet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace feanet {

namespace detail {

struct Node {
  Tensor tensor;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;
}

Var Var::leaf(Tensor value, bool requires_grad) {
  Var v;
  v.node_ = std::make_shared<detail::Node>();
  v.node_->tensor = std::move(value);
  v.node_->requires_grad = requires_grad;
  return v;
}

const Tensor& Var::value() const {
  if (!node_) throw std::logic_error("Var: access to an undefined variable");
  return node_->tensor;
}

Tensor& Var::mutable_value() {
  if (!node_) throw std::logic_error("Var: access to an undefined variable");
  return node_->tensor;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

bool Var::is_leaf() const { return node_ && !node_->backward; }

std::span<const double> Var::grad() const { return value().grad(); }

void Var::zero_grad() {
  if (node_) node_->tensor.zero_grad();
}

std::span<double> Var::grad_buffer() const { return node_->tensor.grad(); }

void Var::accumulate_grad(std::span<const double> g) const {
  auto dst = node_->tensor.grad();
  if (g.size() != dst.size()) {
    throw std::logic_error("Var::accumulate_grad: gradient length mismatch");
  }
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Var out;
  out.node_ = std::make_shared<detail::Node>();
  out.node_->tensor = std::move(value);
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Var& v) { return v.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  for (const auto& in : inputs) {
    if (in.requires_grad()) out.node_->inputs.push_back(in.node_);
  }
  out.node_->backward = std::move(fn);
  return out;
}

void backward(const Var& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined variable");
  if (loss.value().size() != 1) {
    throw std::invalid_argument("backward: expected a scalar node, got shape " +
                                loss.shape().str());
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a reverse topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (node->backward) {
      auto g = node->tensor.grad();
      std::fill(g.begin(), g.end(), 0.0);
    }
  }
  loss.node_->tensor.grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward) node->backward(node->tensor.grad());
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

double grad_check(const std::function<Var()>& loss_fn, std::span<const Var> wrt,
                  double step) {
  std::vector<std::vector<double>> analytic;
  {
    for (Var v : wrt) v.zero_grad();
    Var loss = loss_fn();
    backward(loss);
    for (const Var& v : wrt) {
      auto g = v.grad();
      analytic.emplace_back(g.begin(), g.end());
      if (analytic.back().empty()) analytic.back().assign(v.value().size(), 0.0);
    }
  }

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    Var v = wrt[k];
    auto values = v.mutable_value().values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss_fn().value()[0];
      values[i] = saved - step;
      const double down = loss_fn().value()[0];
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      worst = std::max(worst, relative_error(analytic[k][i], numeric));
    }
  }
  return worst;
}

double grad_check(const std::function<Var(const Var&)>& op, const Tensor& input,
                  double step) {
  Var x = Var::leaf(input, true);
  std::vector<Var> wrt{x};
  return grad_check([&] { return op(x); }, wrt, step);
}

}  // namespace feanet
