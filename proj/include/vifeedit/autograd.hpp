#pragma once

#include "vifeedit/kernels.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace vifeedit {

/// Manifest role of a parameter. Persisted in checkpoints.
enum class ParamRole : std::uint8_t {
  base = 0,         // backbone weight
  frozen_copy = 1,  // spatial-branch copy of a base attention projection
  delta = 2,        // low-rank adapter factor
  moment = 3,       // optimizer state
};

template <typename Scalar>
struct Param {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool trainable = false;
  ParamRole role = ParamRole::base;

  Param() = default;
  Param(std::string n, Tensor<Scalar> v, bool train, ParamRole r)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<Scalar>::zeros(value.shape())),
        trainable(train), role(r) {}

  void zero_grad() { grad = Tensor<Scalar>::zeros(value.shape()); }

  template <typename Other>
  Param<Other> cast() const {
    Param<Other> p(name, value.template cast<Other>(), trainable, role);
    return p;
  }
};

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, int id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape(); }
  Index dim(int axis) const { return value().dim(axis); }
  bool requires_grad() const;

 private:
  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// reverse iteration is a valid topological order for backpropagation.
template <typename Scalar>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor<Scalar>& grad_out)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value);
  /// Leaf for `p`. Repeated calls with the same parameter return the same node.
  Var<Scalar> param(Param<Scalar>& p);

  /// Appends a node computed from `inputs`. The value is checked for NaN/Inf
  /// and `backward` is kept only when some input requires a gradient.
  Var<Scalar> record(const char* op, Tensor<Scalar> value, std::span<const Var<Scalar>> inputs,
                     BackwardFn backward);
  Var<Scalar> record(const char* op, Tensor<Scalar> value,
                     std::initializer_list<Var<Scalar>> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var<Scalar>>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  /// Reverse pass from a one-element root. Parameter leaves accumulate into
  /// Param::grad.
  void backward(Var<Scalar> root);

  /// Adds `g` into the gradient buffer of `v` when it requires one.
  void accumulate(const Var<Scalar>& v, const Tensor<Scalar>& g);
  void accumulate(const Var<Scalar>& v, Tensor<Scalar>&& g);

  const Tensor<Scalar>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Param<Scalar>* param = nullptr;
    const char* op = "";
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Param<Scalar>*, int> param_nodes_;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return graph_->value(id_);
}

template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return graph_->requires_grad(id_);
}

// Differentiable operations. Binary elementwise ops broadcast numpy-style.

template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);
template <typename S> Var<S> scale(Var<S> a, double s);
template <typename S> Var<S> add_scalar(Var<S> a, double s);
template <typename S> Var<S> matmul(Var<S> a, Var<S> b);
/// x[..., in] W[out, in]^T (+ bias[out]).
template <typename S> Var<S> linear(Var<S> x, Var<S> weight);
template <typename S> Var<S> linear(Var<S> x, Var<S> weight, Var<S> bias);
template <typename S> Var<S> softmax_lastdim(Var<S> x);
template <typename S> Var<S> scaled_dot_attention(Var<S> q, Var<S> k, Var<S> v);
template <typename S> Var<S> rope_rotate(Var<S> x, const Tensor<S>& angles);
template <typename S> Var<S> rms_norm(Var<S> x, Var<S> gain, double eps = kRmsNormEps);
template <typename S> Var<S> silu(Var<S> x);
/// tanh approximation of GELU.
template <typename S> Var<S> gelu(Var<S> x);
template <typename S> Var<S> abs(Var<S> x);
template <typename S> Var<S> reshape(Var<S> x, Shape shape);
template <typename S> Var<S> permute(Var<S> x, std::vector<int> axes);
template <typename S> Var<S> concat(std::span<const Var<S>> parts, int axis);
template <typename S> Var<S> concat(std::initializer_list<Var<S>> parts, int axis) {
  return concat(std::span<const Var<S>>(parts.begin(), parts.size()), axis);
}
template <typename S> Var<S> slice(Var<S> x, int axis, Index start, Index length);
template <typename S> Var<S> sum(Var<S> x);
template <typename S> Var<S> mean(Var<S> x);
/// Mean of squared differences over every element.
template <typename S> Var<S> mse(Var<S> a, Var<S> b);

template <typename S> Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S> Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S> Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }

/// Raw permute of a tensor (used by the autograd op and its backward).
template <typename S>
Tensor<S> permute_tensor(const Tensor<S>& x, const std::vector<int>& axes);

}  // namespace vifeedit
