#pragma once

// Dense row-major tensors with define-by-run reverse-mode differentiation.
//
// Every operation that touches a tensor requiring gradients records a node
// holding its inputs and a backward closure. Nodes carry a creation sequence
// number, so replaying the reachable nodes in decreasing sequence order is a
// valid reverse topological order (the "tape").

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lmn/alloc.hpp"

namespace lmn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)) {}
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables graph recording for its lifetime (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {
inline std::uint64_t next_sequence() {
  thread_local std::uint64_t seq = 0;
  return ++seq;
}
}  // namespace detail

template <class T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool released = false;
  std::uint64_t seq = detail::next_sequence();
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Buffer<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T{0}, requires_grad); }

  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->data.assign(lmn::numel(shape), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return BasicTensor(std::move(n));
  }

  static BasicTensor from(Shape shape, std::span<const T> values, bool requires_grad = false) {
    if (lmn::numel(shape) != values.size()) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node<T>>();
    n->data.assign(values.begin(), values.end());
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return BasicTensor(std::move(n));
  }

  static BasicTensor from(Shape shape, std::initializer_list<T> values, bool requires_grad = false) {
    return from(std::move(shape), std::span<const T>(values.begin(), values.size()), requires_grad);
  }

  static BasicTensor from(Shape shape, Buffer<T>&& values) {
    if (lmn::numel(shape) != values.size()) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node<T>>();
    n->data = std::move(values);
    n->shape = std::move(shape);
    return BasicTensor(std::move(n));
  }

  static BasicTensor scalar(T value) { return full({1}, value); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Mutable access for leaves (parameters, optimizer updates, test fixtures).
  std::span<T> mutable_data() {
    if (!node_->leaf) throw ContractError("mutable_data: only leaf tensors may be modified in place");
    return node_->data;
  }

  T item() const {
    if (numel() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  T operator[](std::size_t flat) const { return node_->data[flat]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  BasicTensor& set_requires_grad(bool on) {
    if (!node_->leaf) throw ContractError("set_requires_grad: only leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw ContractError("grad: no gradient populated for tensor " + shape_str(shape()));
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  }

  /// Copy of the values with no history.
  BasicTensor detach() const { return from(shape(), data()); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Reverse-mode pass from a scalar. Leaf gradients accumulate across calls
  /// until zero_grad(); the recorded graph is released afterwards, so calling
  /// backward twice on the same loss is a ContractError.
  void backward() const;

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

/// Wraps a freshly computed buffer as an op result and, when recording,
/// attaches the backward closure.
template <class T>
BasicTensor<T> make_result(Shape shape, Buffer<T>&& data, const std::vector<const BasicTensor<T>*>& inputs,
                           std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool record = false;
  if (grad_enabled()) {
    for (const auto* t : inputs) record = record || t->requires_grad();
  }
  if (record) {
    n->requires_grad = true;
    n->leaf = false;
    n->inputs.reserve(inputs.size());
    for (const auto* t : inputs) n->inputs.push_back(t->node_ptr());
    n->backward = std::move(backward);
  }
  return BasicTensor<T>(std::move(n));
}

/// Gradient buffer of input i if it participates, else nullptr.
template <class T>
T* input_grad(Node<T>& self, std::size_t i) {
  auto& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  return in.ensure_grad().data();
}

}  // namespace detail

template <class T>
void BasicTensor<T>::backward() const {
  if (!node_) throw ContractError("backward: undefined tensor");
  if (numel() != 1) throw ContractError("backward: loss must be a scalar, got shape " + shape_str(shape()));
  if (!node_->requires_grad) throw ContractError("backward: loss does not depend on any tensor requiring grad");
  if (node_->released) throw ContractError("backward: graph already released by a previous backward call");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

  for (Node<T>* n : order) {
    if (!n->leaf) n->grad.assign(n->data.size(), T{0});
  }
  node_->ensure_grad()[0] += T{1};
  for (Node<T>* n : order) {
    if (n->backward) n->backward(*n);
  }
  // Interior nodes may be owned only by their consumers' input lists.
  std::vector<std::shared_ptr<Node<T>>> keep_alive;
  keep_alive.reserve(order.size());
  for (Node<T>* n : order)
    for (auto& in : n->inputs) keep_alive.push_back(in);
  for (Node<T>* n : order) {
    if (!n->leaf) {
      n->backward = nullptr;
      n->inputs.clear();
      n->released = true;
    }
  }
}

}  // namespace lmn
