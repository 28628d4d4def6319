#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lmnet/tensor.hpp"

namespace lmnet {

// Define-by-run tape. Every differentiable op builds a Node that keeps its
// inputs alive and knows how to push its output gradient into them.
// A tape belongs to one thread; independent tapes may run concurrently.

inline thread_local bool g_grad_enabled = true;

class NoGradGuard {
 public:
  NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return g_grad_enabled; }

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows in
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  std::string op = "leaf";

  bool is_leaf() const { return parents.empty(); }

  bool has_grad() const { return grad.size() == value.size() && grad.shape() == value.shape(); }

  void accumulate(const Tensor<T>& g) {
    if (g.shape() != value.shape()) {
      throw ShapeError("gradient shape " + shape_string(g.shape()) + " does not match value " +
                       shape_string(value.shape()) + " in op " + op);
    }
    if (!has_grad()) {
      grad = g;
      return;
    }
    add_into(grad, g);
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  // Direct access for optimizers and weight loading; never mutate a value
  // that is part of a live tape.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  bool has_grad() const { return node_->has_grad(); }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  Var detach() const { return Var(node_->value, false); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <class T>
Var<T> parameter(Tensor<T> value) {
  return Var<T>(std::move(value), true);
}

/// Records one op on the tape. When gradients are disabled or no input
/// needs them the result is a plain constant and `backward_fn` is dropped.
/// An op without a backward rule is rejected inside a gradient context.
template <class T>
Var<T> record(std::string op, Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (!needs) return Var<T>(std::move(value), false);
  if (!backward_fn) throw ValueError("non-differentiable op '" + op + "' requested in a gradient context");
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->op = std::move(op);
  node->backward_fn = std::move(backward_fn);
  node->parents.reserve(inputs.size());
  for (auto& in : inputs) node->parents.push_back(in.node());
  return Var<T>(std::move(node));
}

namespace detail {

template <class T>
std::vector<std::shared_ptr<Node<T>>> topo_order(const std::shared_ptr<Node<T>>& root) {
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const auto& p = node->parents[next++];
      if (p->requires_grad && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }
  return order;  // parents before children
}

}  // namespace detail

/// Accumulates d(root)/d(leaf) into every leaf that requires a gradient.
/// Interior gradients and closures are released afterwards.
template <class T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) {
    throw ValueError("backward requires a scalar root, got shape " + shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;
  Node<T>* r = root.node().get();
  // Holding owning pointers keeps nodes alive while parents are released.
  auto order = detail::topo_order(root.node());
  r->accumulate(Tensor<T>::full(r->value.shape(), T{1}));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = it->get();
    if (n->is_leaf()) continue;
    if (n->has_grad() && n->backward_fn) n->backward_fn(*n);
    n->grad = Tensor<T>();
    n->backward_fn = nullptr;
    n->parents.clear();
  }
}

// Pushes a gradient into parent i if it wants one.
template <class T>
void push_grad(Node<T>& self, std::size_t i, const Tensor<T>& g) {
  auto& p = self.parents[i];
  if (p->requires_grad) p->accumulate(g);
}

template <class T>
bool wants_grad(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

// ---------------------------------------------------------------------------
// Elementwise and algebraic ops.

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return record<T>("add", add(a.value(), b.value()), {a, b}, [](Node<T>& s) {
    push_grad(s, 0, s.grad);
    push_grad(s, 1, s.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return record<T>("sub", sub(a.value(), b.value()), {a, b}, [](Node<T>& s) {
    push_grad(s, 0, s.grad);
    if (wants_grad(s, 1)) push_grad(s, 1, mul_scalar(s.grad, T{-1}));
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return record<T>("mul", mul(a.value(), b.value()), {a, b}, [](Node<T>& s) {
    if (wants_grad(s, 0)) push_grad(s, 0, mul(s.grad, s.parents[1]->value));
    if (wants_grad(s, 1)) push_grad(s, 1, mul(s.grad, s.parents[0]->value));
  });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return record<T>("div", div(a.value(), b.value()), {a, b}, [](Node<T>& s) {
    const auto& bv = s.parents[1]->value;
    if (wants_grad(s, 0)) push_grad(s, 0, div(s.grad, bv));
    if (wants_grad(s, 1)) {
      // d(a/b)/db = -a/b^2 = -out/b
      Tensor<T> g = mul(s.grad, div(s.value, bv));
      push_grad(s, 1, mul_scalar(g, T{-1}));
    }
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
  return record<T>("add_scalar", add_scalar(a.value(), c), {a}, [](Node<T>& s) { push_grad(s, 0, s.grad); });
}

template <class T>
Var<T> mul_scalar(const Var<T>& a, T c) {
  return record<T>("mul_scalar", mul_scalar(a.value(), c), {a},
                   [c](Node<T>& s) { push_grad(s, 0, mul_scalar(s.grad, c)); });
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return record<T>("relu", relu(a.value()), {a}, [](Node<T>& s) {
    const auto& x = s.parents[0]->value;
    Tensor<T> g(x.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = x[i] > T{0} ? s.grad[i] : T{0};
    push_grad(s, 0, g);
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return record<T>("sigmoid", sigmoid(a.value()), {a}, [](Node<T>& s) {
    Tensor<T> g(s.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = s.grad[i] * s.value[i] * (T{1} - s.value[i]);
    push_grad(s, 0, g);
  });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return record<T>("exp", exp(a.value()), {a}, [](Node<T>& s) { push_grad(s, 0, mul(s.grad, s.value)); });
}

template <class T>
Var<T> ln(const Var<T>& a) {
  return record<T>("ln", ln(a.value()), {a}, [](Node<T>& s) { push_grad(s, 0, div(s.grad, s.parents[0]->value)); });
}

// Exact (erf) GELU.
template <class T>
Var<T> gelu(const Var<T>& a) {
  Tensor<T> out = detail::map(a.value(), [](T x) {
    return T(0.5) * x * (T{1} + std::erf(x / std::numbers::sqrt2_v<T>));
  });
  return record<T>("gelu", std::move(out), {a}, [](Node<T>& s) {
    const auto& x = s.parents[0]->value;
    const T inv_sqrt_2pi = T{1} / std::sqrt(T{2} * std::numbers::pi_v<T>);
    Tensor<T> g(x.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x[i];
      const T cdf = T(0.5) * (T{1} + std::erf(v / std::numbers::sqrt2_v<T>));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] = s.grad[i] * (cdf + v * pdf);
    }
    push_grad(s, 0, g);
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  return record<T>("sum", Tensor<T>::scalar(sum_all(a.value())), {a}, [](Node<T>& s) {
    push_grad(s, 0, Tensor<T>::full(s.parents[0]->value.shape(), s.grad[0]));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.value().size());
  return record<T>("mean", Tensor<T>::scalar(sum_all(a.value()) / n), {a}, [n](Node<T>& s) {
    push_grad(s, 0, Tensor<T>::full(s.parents[0]->value.shape(), s.grad[0] / n));
  });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  return record<T>("matmul", matmul(a.value(), b.value()), {a, b}, [](Node<T>& s) {
    if (wants_grad(s, 0)) push_grad(s, 0, matmul(s.grad, transpose2d(s.parents[1]->value)));
    if (wants_grad(s, 1)) push_grad(s, 1, matmul(transpose2d(s.parents[0]->value), s.grad));
  });
}

template <class T>
Var<T> transpose2d(const Var<T>& a) {
  return record<T>("transpose2d", transpose2d(a.value()), {a},
                   [](Node<T>& s) { push_grad(s, 0, transpose2d(s.grad)); });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  return record<T>("reshape", a.value().reshape(std::move(shape)), {a},
                   [](Node<T>& s) { push_grad(s, 0, s.grad.reshape(s.parents[0]->value.shape())); });
}

template <class T>
Var<T> permute(const Var<T>& a, std::vector<std::size_t> perm) {
  Tensor<T> out = permute(a.value(), perm);
  return record<T>("permute", std::move(out), {a}, [perm](Node<T>& s) {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    push_grad(s, 0, permute(s.grad, inv));
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  std::vector<const Tensor<T>*> values;
  for (const auto& p : parts) values.push_back(&p.value());
  Tensor<T> out = concat(values, axis);
  return record<T>("concat", std::move(out), parts, [axis](Node<T>& s) {
    std::size_t begin = 0;
    for (std::size_t i = 0; i < s.parents.size(); ++i) {
      const std::size_t extent = s.parents[i]->value.shape()[axis];
      if (wants_grad(s, i)) push_grad(s, i, slice(s.grad, axis, begin, begin + extent));
      begin += extent;
    }
  });
}

template <class T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  return record<T>("slice", slice(a.value(), axis, begin, end), {a}, [axis, begin](Node<T>& s) {
    const Shape& in_shape = s.parents[0]->value.shape();
    Tensor<T> g(in_shape);
    std::size_t outer, inner;
    detail::split_axis(in_shape, axis, outer, inner);
    const std::size_t in_row = in_shape[axis] * inner;
    const std::size_t out_row = s.grad.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(s.grad.ptr() + o * out_row, out_row, g.ptr() + o * in_row + begin * inner);
    }
    push_grad(s, 0, g);
  });
}

}  // namespace lmnet
