#pragma once

#include <optional>
#include <string>
#include <vector>

#include "feanet/nn.hpp"

namespace feanet::nn {

struct NamedParam {
  std::string name;
  Var var;
};

struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

/// Flat view of a model's learnable parameters and persistent buffers,
/// in registration order. Names are stable and used as checkpoint keys.
struct StateList {
  std::vector<NamedParam> params;
  std::vector<NamedBuffer> buffers;

  std::size_t parameter_count() const;
};

/// Fan-in scaled uniform weights: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng);

/// Learnable conv or transposed conv with its geometry.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const ConvSpec& spec, bool transposed, Rng& rng);

  Var operator()(const Var& x) const;
  const ConvSpec& spec() const { return spec_; }
  bool transposed() const { return transposed_; }
  void zero_weights();
  void collect(const std::string& prefix, StateList& out) const;

  Var weight;
  std::optional<Var> bias;

 private:
  ConvSpec spec_;
  bool transposed_ = false;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);

  Var operator()(const Var& x, Mode mode);
  void collect(const std::string& prefix, StateList& out);

  Var gamma;
  Var beta;
  BatchNormState state;
};

}  // namespace feanet::nn
