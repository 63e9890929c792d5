#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rdcssl/error.hpp"

namespace rdcssl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

namespace detail {

// One vertex of the define-by-run graph. Interior nodes keep their parents
// alive until the loss tensor that reaches them is dropped.
template <std::floating_point S>
struct Node {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<S>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), S(0));
    return grad;
  }
};

}  // namespace detail

template <std::floating_point S>
class Tensor {
 public:
  using Scalar = S;
  using NodePtr = std::shared_ptr<detail::Node<S>>;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (rdcssl::numel(shape) != data.size()) {
      throw DimensionError("tensor: shape " + to_string(shape) + " holds " + std::to_string(rdcssl::numel(shape)) +
                           " values, got " + std::to_string(data.size()));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor: zero-sized dimension in shape " + to_string(shape));
    }
    auto node = std::make_shared<detail::Node<S>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = rdcssl::numel(shape);
    return from(std::move(shape), std::vector<S>(n, S(0)), requires_grad);
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    auto n = rdcssl::numel(shape);
    return from(std::move(shape), std::vector<S>(n, value), requires_grad);
  }

  static Tensor scalar(S value, bool requires_grad = false) { return from({}, {value}, requires_grad); }

  // Internal: wrap a node produced by an op.
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const S> data() const { return node_->data; }
  // Writable access is only meaningful for leaves (parameters, inputs).
  std::span<S> mutable_data() { return node_->data; }
  std::span<const S> grad() const { return node_->grad; }
  std::span<S> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  S item() const {
    if (numel() != 1) throw ContractError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->data[0];
  }

  S operator[](std::size_t i) const { return node_->data.at(i); }

  // Copy of the values with no graph history.
  Tensor detach() const { return from(shape(), node_->data, false); }

  template <std::floating_point T>
  Tensor<T> cast() const {
    return Tensor<T>::from(shape(), std::vector<T>(node_->data.begin(), node_->data.end()));
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Topologically ordered record of the operations reachable from a scalar loss.
// Parents always precede children in nodes().
template <std::floating_point S>
class GradTape {
 public:
  using NodeT = detail::Node<S>;

  explicit GradTape(const Tensor<S>& loss) : loss_(loss) {
    if (!loss.defined()) throw ContractError("backward: undefined loss tensor");
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
    }
    build();
  }

  const std::vector<NodeT*>& nodes() const { return order_; }

  std::vector<Tensor<S>> leaves() const {
    std::vector<Tensor<S>> out;
    for (auto* n : order_) {
      if (n->parents.empty()) out.emplace_back(holders_.at(n));
    }
    return out;
  }

  // Populates grad on every reachable leaf, accumulating into existing grads.
  void backward() {
    if (loss_.node()->consumed) {
      throw StateError("backward: graph already differentiated; call reset() before running it again");
    }
    if (!loss_.requires_grad()) throw ContractError("backward: loss does not depend on any leaf requiring grad");
    for (auto* n : order_) {
      if (!n->parents.empty()) n->grad.clear();
    }
    auto& g = loss_.node()->ensure_grad();
    g[0] += S(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      NodeT* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    loss_.node()->consumed = true;
  }

  void reset() {
    loss_.node()->consumed = false;
    for (auto* n : order_) {
      if (!n->parents.empty()) n->grad.clear();
    }
  }

 private:
  void build() {
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<std::shared_ptr<NodeT>, std::size_t>> stack;
    stack.emplace_back(loss_.node(), 0);
    seen.insert(loss_.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        auto parent = node->parents[next++];
        if (parent->requires_grad && seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
      } else {
        order_.push_back(node.get());
        holders_.emplace(node.get(), node);
        stack.pop_back();
      }
    }
  }

  Tensor<S> loss_;
  std::vector<NodeT*> order_;
  std::unordered_map<NodeT*, std::shared_ptr<NodeT>> holders_;
};

// One reverse pass from a scalar loss. A second call on the same loss throws.
template <std::floating_point S>
void backward(const Tensor<S>& loss) {
  GradTape<S> tape(loss);
  tape.backward();
}

namespace detail {

// Builds the result node of an op; the backward closure is recorded only when
// some input takes part in differentiation.
template <std::floating_point S>
Tensor<S> make_result(const char* op, Shape shape, std::vector<S> data,
                      std::vector<std::shared_ptr<Node<S>>> parents, std::function<void(Node<S>&)> backward_fn) {
  auto node = std::make_shared<Node<S>>();
  node->op = op;
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool any = std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  if (any) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<S>(std::move(node));
}

}  // namespace detail

}  // namespace rdcssl
