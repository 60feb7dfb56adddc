#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>

#include "vndiff/tensor.hpp"

namespace vndiff {

// A trainable tensor. `grad` accumulates across backward passes until
// zero_grad(); parameters with requires_grad == false never receive gradient.
template <typename Real>
struct Parameter {
  Tensor<Real> value;
  Tensor<Real> grad;
  bool requires_grad = true;

  Parameter() = default;
  explicit Parameter(Shape shape) : value(std::move(shape)) {}

  void zero_grad() { grad = Tensor<Real>(value.shape()); }
};

// Handle to a node of a Graph.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

enum class GradMode { enabled, disabled };

// Reverse-mode differentiation tape. Nodes are appended in evaluation order,
// which is a valid topological order, so backward() walks them in reverse.
//
// Gradient flows through any node that depends on a parameter with
// requires_grad set; frozen parameters still pass gradient to upstream
// activations but never accumulate it themselves.
template <typename Real>
class Graph {
 public:
  explicit Graph(GradMode mode = GradMode::enabled) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return mode_ == GradMode::enabled; }

  Var constant(Tensor<Real> value);
  Var parameter(Parameter<Real>& p);

  const Tensor<Real>& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  // Moves the value out; the node must not be used afterwards.
  Tensor<Real> take(Var v) { return std::move(nodes_[v.id].value); }

  // Seeds d(out)/d(out) = 1 for a single-element node and propagates.
  void backward(Var out);

  // x: [Ci, D, H, W]; weight: [Co, Ci, k, k, k]; bias: [Co].
  Var conv3d(Var x, Var weight, Var bias, int stride = 1);
  Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
  Var silu(Var x);
  Var add(Var a, Var b);
  // x: [C, ...] plus bias: [C] broadcast over the trailing extents.
  Var add_channel_bias(Var x, Var bias);
  Var concat_channels(Var a, Var b);
  Var upsample_nearest2(Var x);
  // x: [in]; weight: [out, in]; bias: [out].
  Var linear(Var x, Var weight, Var bias);
  // Mean squared error against a fixed target; yields a [1] node.
  Var mse(Var pred, const Tensor<Real>& target);

 private:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  Var push(Tensor<Real> value, bool requires_grad);
  bool any_grad(std::initializer_list<Var> vars) const;
  Tensor<Real>& grad_of(Var v);

  GradMode mode_;
  std::deque<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace vndiff
