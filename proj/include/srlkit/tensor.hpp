// Dense tensor values on a define-by-run reverse-mode differentiation graph.
//
// A Tensor<Scalar> is a shared handle to one graph node holding a flat
// row-major Eigen array plus shape metadata. Operations (see ops.hpp) create
// new nodes that record their inputs and a backward closure; backward() walks
// the recorded graph once in reverse topological order. Graphs are rebuilt on
// every forward pass, so alternating-task training never reuses stale
// topology. Data is immutable after the forward pass; only leaf values may be
// rewritten (by initializers and the optimizer) between passes.

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "srlkit/rng.hpp"

namespace srlkit {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixRM =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

class GraphError : public std::runtime_error {
 public:
  explicit GraphError(const std::string& what) : std::runtime_error(what) {}
};

class ValueError : public std::runtime_error {
 public:
  explicit ValueError(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline void check_shape_positive(const Shape& s, const char* op) {
  for (Index d : s) {
    if (d <= 0)
      throw ShapeError(std::string(op) + ": extents must be positive, got " +
                       shape_str(s));
  }
}

// One vertex of the differentiation graph. Interior nodes carry a backward
// closure that reads this node's grad and accumulates into its inputs' grads;
// leaves carry none. `backward_done` enforces one backward pass per forward
// pass: revisiting a node is an error.
template <typename Scalar>
struct Node {
  Shape shape;
  ArrayX<Scalar> value;
  ArrayX<Scalar> grad;  // zero-initialized for requires_grad leaves, lazy otherwise
  bool requires_grad = false;
  bool leaf = true;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;

  Index numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad = ArrayX<Scalar>::Zero(value.size());
  }
};

template <typename Scalar>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() = default;

  static Tensor from_node(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  static Tensor from_values(Shape shape, ArrayX<Scalar> values,
                            bool requires_grad = false) {
    check_shape_positive(shape, "tensor");
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " expects " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    if (!values.isFinite().all())
      throw ValueError("tensor: non-finite value in input data");
    auto n = std::make_shared<Node<Scalar>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    return from_node(std::move(n));
  }

  static Tensor from_data(Shape shape, const std::vector<Scalar>& data,
                          bool requires_grad = false) {
    ArrayX<Scalar> v(static_cast<Index>(data.size()));
    for (Index i = 0; i < v.size(); ++i) v[i] = data[static_cast<std::size_t>(i)];
    return from_values(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar_value(Scalar v, bool requires_grad = false) {
    ArrayX<Scalar> a(1);
    a[0] = v;
    return from_values(Shape{}, std::move(a), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    check_shape_positive(shape, "zeros");
    Index n = shape_numel(shape);
    return from_values(std::move(shape), ArrayX<Scalar>::Zero(n), requires_grad);
  }

  static Tensor full(Shape shape, Scalar v, bool requires_grad = false) {
    check_shape_positive(shape, "full");
    Index n = shape_numel(shape);
    return from_values(std::move(shape), ArrayX<Scalar>::Constant(n, v),
                       requires_grad);
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    check_shape_positive(shape, "randn");
    Index n = shape_numel(shape);
    ArrayX<Scalar> v(n);
    for (Index i = 0; i < n; ++i)
      v[i] = static_cast<Scalar>(rng.normal() * stddev);
    return from_values(std::move(shape), std::move(v), requires_grad);
  }

  // U(-bound, bound); the initializer of choice for large parameter stores
  // (one engine draw per value).
  static Tensor rand_uniform(Shape shape, Rng& rng, double bound,
                             bool requires_grad = false) {
    check_shape_positive(shape, "rand_uniform");
    Index n = shape_numel(shape);
    ArrayX<Scalar> v(n);
    for (Index i = 0; i < n; ++i)
      v[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
    return from_values(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  Index rank() const { return static_cast<Index>(node()->shape.size()); }
  Index dim(Index i) const { return node()->shape[static_cast<std::size_t>(i)]; }
  Index numel() const { return node()->numel(); }
  bool requires_grad() const { return node()->requires_grad; }
  bool is_leaf() const { return node()->leaf; }
  const char* op() const { return node()->op; }

  const ArrayX<Scalar>& values() const { return node()->value; }

  // Leaf-only mutation hooks for initializers and the optimizer.
  ArrayX<Scalar>& mutable_values() {
    if (!node()->leaf)
      throw GraphError("mutable_values: only leaf tensors may be mutated");
    return node()->value;
  }

  void set_requires_grad(bool v) {
    if (!node()->leaf)
      throw GraphError("set_requires_grad: only valid on leaf tensors");
    node()->requires_grad = v;
    if (v) node()->ensure_grad();
  }

  const ArrayX<Scalar>& grad() const {
    if (!node()->requires_grad)
      throw GraphError("grad: tensor does not require gradients");
    node()->ensure_grad();
    return node()->grad;
  }

  void zero_grad() {
    node()->ensure_grad();
    node()->grad.setZero();
  }

  Scalar item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
    return node()->value[0];
  }

  Scalar at(Index i) const { return node()->value[i]; }
  Scalar at(Index r, Index c) const {
    return node()->value[r * shape().back() + c];
  }

  bool all_finite() const { return node()->value.isFinite().all(); }

  void check_finite(const char* context) const {
    if (!all_finite())
      throw ValueError(std::string(context) + ": non-finite value detected");
  }

  // Value copy detached from the graph.
  Tensor detach() const {
    return from_values(shape(), node()->value, false);
  }

  const NodePtr& node_ptr() const { return node_; }
  Node<Scalar>* node() const {
    if (!node_) throw GraphError("operation on undefined tensor");
    return node_.get();
  }

 private:
  NodePtr node_;
};

// Builds an interior node. Inputs and the backward closure are only retained
// when some input requires gradients; otherwise the result is a constant and
// backward passes stop here.
template <typename Scalar>
Tensor<Scalar> make_op(const char* op, Shape shape, ArrayX<Scalar> value,
                       std::vector<Tensor<Scalar>> inputs,
                       std::function<void(Node<Scalar>&)> backprop) {
  auto n = std::make_shared<Node<Scalar>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  n->op = op;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  n->requires_grad = needs;
  if (needs) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node_ptr());
    n->backprop = std::move(backprop);
  }
  return Tensor<Scalar>::from_node(std::move(n));
}

// Reverse-mode sweep from a scalar root. Gradients accumulate (sum over all
// paths) into every reachable requires_grad leaf. Each interior node may be
// consumed by exactly one sweep; a second sweep through any part of the same
// graph throws.
template <typename Scalar>
void backward(const Tensor<Scalar>& root) {
  Node<Scalar>* r = root.node();
  if (r->numel() != 1)
    throw GraphError("backward: root must be scalar, got " +
                     shape_str(r->shape));
  if (r->backward_done)
    throw GraphError("backward: graph already consumed by a previous backward");
  if (!r->requires_grad) return;  // no differentiable leaves below the root

  // Iterative DFS post-order: inputs come before consumers in `order`.
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  struct Frame {
    Node<Scalar>* node;
    std::size_t next_input;
  };
  std::vector<Frame> stack;
  stack.push_back({r, 0});
  seen.insert(r);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_input < f.node->inputs.size()) {
      Node<Scalar>* in = f.node->inputs[f.next_input++].get();
      if (in->requires_grad && !seen.count(in)) {
        seen.insert(in);
        stack.push_back({in, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  r->ensure_grad();
  r->grad[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (n->leaf) continue;
    if (n->backward_done)
      throw GraphError(std::string("backward: node '") + n->op +
                       "' already consumed by a previous backward");
    if (!n->backprop) continue;
    n->ensure_grad();
    n->backprop(*n);
    n->backward_done = true;
    n->backprop = nullptr;  // frees saved activations as the sweep proceeds
  }
}

}  // namespace srlkit
