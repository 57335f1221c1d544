#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value in the system is a rows x cols matrix (vectors are 1 x n,
// scalars 1 x 1). Operations record their parents and a backward closure
// when gradient recording is enabled and at least one input requires a
// gradient. Tensor is a cheap handle; copies share the node.

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "gpm/common/error.hpp"

namespace gpm::nn {

template <class T>
struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
  bool is_leaf() const { return !backward_fn; }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return from(rows, cols, std::vector<T>(rows * cols, T(0)), requires_grad);
  }

  static Tensor from(std::size_t rows, std::size_t cols, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != rows * cols)
      throw InvalidArgument("Tensor: value count " + std::to_string(values.size()) + " does not match shape " +
                            std::to_string(rows) + "x" + std::to_string(cols));
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from(1, 1, {v}, requires_grad); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }

  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::vector<T>& grad_storage() { return node_->ensure_grad(); }
  T operator()(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  T item() const {
    if (size() != 1) throw InvalidArgument("Tensor::item on non-scalar");
    return node_->value[0];
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// A new leaf holding a copy of the values, detached from the graph.
  Tensor detach() const { return from(rows(), cols(), node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  /// Backpropagates from a scalar. Leaf gradients accumulate across calls;
  /// intermediate gradients are reset at the start of each call.
  void backward() const {
    if (size() != 1) throw InvalidArgument("backward: loss must be a scalar");
    if (!node_->requires_grad) return;
    std::vector<Node<T>*> order;
    topo_sort(order);
    for (Node<T>* n : order)
      if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (!n->is_leaf()) n->backward_fn(*n);
    }
    for (Node<T>* n : order)
      if (!n->is_leaf()) {
        n->grad.clear();
        n->grad.shrink_to_fit();
      }
  }

 private:
  void topo_sort(std::vector<Node<T>*>& order) const {
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (const T& x : v)
    if (!std::isfinite(x)) throw NumericFailure(std::string("non-finite value produced by op '") + op + "'");
}

/// Wraps a freshly computed value into a graph node. `backward` receives the
/// result node; its `parents` are in the order given here.
template <class T, class Fn>
Tensor<T> make_result(std::size_t rows, std::size_t cols, std::vector<T>&& value, const char* op,
                      std::initializer_list<Tensor<T>> parents, Fn&& backward) {
  check_finite(value, op);
  auto n = std::make_shared<Node<T>>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Tensor<T>(std::move(n));
}

template <class T, class Fn>
Tensor<T> make_result(std::size_t rows, std::size_t cols, std::vector<T>&& value, const char* op,
                      const std::vector<Tensor<T>>& parents, Fn&& backward) {
  check_finite(value, op);
  auto n = std::make_shared<Node<T>>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Tensor<T>(std::move(n));
}

/// Gradient buffer of parent i if it participates in backprop, else null.
template <class T>
std::vector<T>* parent_grad(Node<T>& self, std::size_t i) {
  Node<T>* p = self.parents[i].get();
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

}  // namespace detail
}  // namespace gpm::nn
