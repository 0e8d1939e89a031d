#pragma once

// Reverse-mode automatic differentiation over Tensor<T>.
//
// A Var is a handle to a graph node. Nodes created from inputs that require
// gradients keep their parents alive and carry a backward closure; nodes that
// do not require gradients keep neither, so inference-only graphs release
// intermediates as soon as the handles go out of scope.

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "demix/error.hpp"
#include "demix/tensor.hpp"

namespace demix::ad {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>(value.shape());
      has_grad = true;
    }
    return grad;
  }
  void clear_grad() {
    grad = Tensor<T>();
    has_grad = false;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  /// Leaf values only; mutating an interior node invalidates its graph.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const char* op() const { return node_->op; }
  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Tensor<T> value) {
  return Var<T>::leaf(std::move(value), false);
}

template <class T>
Var<T> parameter(Tensor<T> value) {
  return Var<T>::leaf(std::move(value), true);
}

namespace detail {

template <class T>
void check_finite(const Tensor<T>& t, const char* op, const char* what) {
  if (!t.all_finite()) throw NumericError(op, std::string("non-finite ") + what);
}

/// Gradient accumulator of a parent, or nullptr when it needs none.
template <class T>
Tensor<T>* grad_of(Node<T>& parent) {
  return parent.requires_grad ? &parent.grad_buffer() : nullptr;
}

}  // namespace detail

/// Wraps a forward result into a graph node. `backward` receives the node
/// whose `grad` holds dLoss/dOutput and accumulates into its parents.
template <class T>
Var<T> make_result(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
  detail::check_finite(value, op, "forward value");
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    for (const auto& in : inputs) n->parents.push_back(in.shared());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

/// Gradients of scalar `loss` with respect to each of `wrt`. Inputs that do
/// not influence the loss get zero gradients. No gradient state survives the
/// call, so a graph may be differentiated repeatedly.
template <class T>
std::vector<Tensor<T>> grad(const Var<T>& loss, std::span<const Var<T>> wrt) {
  if (loss.value().size() != 1)
    throw ShapeError("tensorops", "grad of non-scalar loss " + shape_str(loss.shape()));

  std::vector<Node<T>*> order;
  if (loss.requires_grad()) {
    // Iterative post-order DFS gives a topological order (parents first).
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
    visited.insert(loss.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* p = node->parents[next++].get();
        if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<Node<T>*> keep;
  for (const auto& w : wrt) keep.insert(w.node());

  if (!order.empty()) {
    loss.node()->grad_buffer().fill(T{1});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->has_grad && n->backward) {
        n->backward(*n);
        for (const auto& p : n->parents)
          if (p->has_grad) detail::check_finite(p->grad, n->op, "gradient");
      }
      if (!keep.count(n) && !n->parents.empty()) n->clear_grad();
    }
  }

  std::vector<Tensor<T>> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    Node<T>* n = w.node();
    out.push_back(n->has_grad ? std::move(n->grad) : Tensor<T>(n->value.shape()));
    n->clear_grad();
  }
  for (Node<T>* n : order) n->clear_grad();
  return out;
}

template <class T>
std::vector<Tensor<T>> grad(const Var<T>& loss, const std::vector<Var<T>>& wrt) {
  return grad(loss, std::span<const Var<T>>(wrt));
}

template <class T, class LossFn>
  requires std::is_invocable_r_v<Var<T>, LossFn>
std::vector<Tensor<T>> grad(LossFn&& loss_fn, const std::vector<Var<T>>& params) {
  return grad(Var<T>(std::forward<LossFn>(loss_fn)()), std::span<const Var<T>>(params));
}

// ---------------------------------------------------------------------------
// Elementwise and structural primitives.

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError("tensorops", std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                      shape_str(b));
}

struct AxisSplit {
  std::size_t outer, mid, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError("tensorops", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (auto* g = detail::grad_of(*p))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result<T>("sub", std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(*self.parents[1]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_result<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = detail::grad_of(*self.parents[1]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result<T>("scale", std::move(out), {a}, [s](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

template <class T>
Var<T> square(const Var<T>& a) {
  return mul(a, a);
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T acc{0};
  for (T v : a.value().values()) acc += v;
  return make_result<T>("sum", Tensor<T>::scalar(acc), {a}, [](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0])) {
      const T go = self.grad[0];
      for (auto& v : g->values()) v += go;
    }
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("tensorops", "mean of empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

/// Sum of `a * weights` with constant weights; zero weights block gradients
/// exactly.
template <class T>
Var<T> weighted_sum(const Var<T>& a, Tensor<T> weights) {
  detail::require_same_shape(a.shape(), weights.shape(), "weighted_sum");
  T acc{0};
  const auto& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * weights[i];
  return make_result<T>("weighted_sum", Tensor<T>::scalar(acc), {a},
                        [w = std::move(weights)](Node<T>& self) {
                          if (auto* g = detail::grad_of(*self.parents[0])) {
                            const T go = self.grad[0];
                            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += go * w[i];
                          }
                        });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>("reshape", std::move(out), {a}, [](Node<T>& self) {
    if (auto* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

/// Concatenates along `axis`; all other dimensions must agree.
template <class T>
Var<T> concat(const Var<T>& a, const Var<T>& b, std::size_t axis = 1) {
  const auto sa = detail::split_at(a.shape(), axis);
  const auto sb = detail::split_at(b.shape(), axis);
  Shape check_a = a.shape(), check_b = b.shape();
  check_a[axis] = check_b[axis] = 0;
  detail::require_same_shape(check_a, check_b, "concat");

  Shape out_shape = a.shape();
  out_shape[axis] = sa.mid + sb.mid;
  Tensor<T> out(out_shape);
  const std::size_t la = sa.mid * sa.inner, lb = sb.mid * sb.inner;
  for (std::size_t o = 0; o < sa.outer; ++o) {
    std::copy_n(a.value().data() + o * la, la, out.data() + o * (la + lb));
    std::copy_n(b.value().data() + o * lb, lb, out.data() + o * (la + lb) + la);
  }
  return make_result<T>("concat", std::move(out), {a, b}, [la, lb, outer = sa.outer](Node<T>& self) {
    auto* ga = detail::grad_of(*self.parents[0]);
    auto* gb = detail::grad_of(*self.parents[1]);
    for (std::size_t o = 0; o < outer; ++o) {
      const T* src = self.grad.data() + o * (la + lb);
      if (ga)
        for (std::size_t i = 0; i < la; ++i) (*ga)[o * la + i] += src[i];
      if (gb)
        for (std::size_t i = 0; i < lb; ++i) (*gb)[o * lb + i] += src[la + i];
    }
  });
}

/// Zero-pads or crops the end of `axis` to `length`.
template <class T>
Var<T> resize_axis(const Var<T>& a, std::size_t axis, std::size_t length) {
  const auto s = detail::split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  const std::size_t keep = std::min(s.mid, length) * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(a.value().data() + o * s.mid * s.inner, keep, out.data() + o * length * s.inner);
  return make_result<T>("resize_axis", std::move(out), {a},
                        [s, length, keep](Node<T>& self) {
                          if (auto* g = detail::grad_of(*self.parents[0]))
                            for (std::size_t o = 0; o < s.outer; ++o) {
                              const T* src = self.grad.data() + o * length * s.inner;
                              T* dst = g->data() + o * s.mid * s.inner;
                              for (std::size_t i = 0; i < keep; ++i) dst[i] += src[i];
                            }
                        });
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(const Var<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x = T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
  return make_result<T>("gelu", std::move(out), {a}, [](Node<T>& self) {
    auto* g = detail::grad_of(*self.parents[0]);
    if (!g) return;
    const auto& in = self.parents[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const T x = in[i];
      const T th = std::tanh(c * (x + k * x * x * x));
      const T dth = (T(1) - th * th) * c * (T(1) + T(3) * k * x * x);
      (*g)[i] += self.grad[i] * (T(0.5) * (T(1) + th) + T(0.5) * x * dth);
    }
  });
}

}  // namespace demix::ad
