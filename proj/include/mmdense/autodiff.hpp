#pragma once

// Reverse-mode automatic differentiation over a dynamically recorded graph.
//
// A Graph is a tape: every op appends one node holding its output value and a
// closure that maps the output adjoint onto input adjoints. Nodes are appended
// after their inputs, so tape order is a topological order and backward() is a
// single reverse sweep.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmdense/tensor.hpp"

namespace mmdense {

struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

template <class T>
class Graph;

template <class T>
class BackwardContext {
 public:
  BackwardContext(const Graph<T>& g, std::size_t node, std::vector<Tensor<T>>& grads)
      : g_(g), node_(node), grads_(grads) {}

  const Tensor<T>& grad_out() const { return grads_[node_]; }
  const Tensor<T>& output() const { return g_.value(Var{node_}); }
  const Tensor<T>& input(std::size_t i) const { return g_.value(g_.inputs(Var{node_}).at(i)); }
  std::size_t num_inputs() const { return g_.inputs(Var{node_}).size(); }
  bool needs_grad(std::size_t i) const { return g_.requires_grad(g_.inputs(Var{node_}).at(i)); }

  /// Adjoint buffer of input `i`, zero-initialised on first touch. Ops
  /// accumulate into it with +=, which handles fan-out.
  Tensor<T>& input_grad(std::size_t i) {
    const Var in = g_.inputs(Var{node_}).at(i);
    auto& slot = grads_[in.id];
    if (slot.empty()) slot = Tensor<T>::zeros_like(g_.value(in));
    return slot;
  }

 private:
  const Graph<T>& g_;
  std::size_t node_;
  std::vector<Tensor<T>>& grads_;
};

/// Gradients of a scalar root with respect to every trainable leaf.
template <class T>
class GradMap {
 public:
  void insert(Var leaf, const std::string& name, Tensor<T> grad) {
    by_name_[name] = leaf.id;
    grads_.emplace(leaf.id, std::move(grad));
  }
  const Tensor<T>& operator[](Var leaf) const {
    auto it = grads_.find(leaf.id);
    MMDENSE_REQUIRE(it != grads_.end(), Errc::invalid_argument, "no gradient recorded for node " + std::to_string(leaf.id));
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = by_name_.find(name);
    MMDENSE_REQUIRE(it != by_name_.end(), Errc::invalid_argument, "no gradient for parameter '" + name + "'");
    return grads_.at(it->second);
  }
  bool contains(const std::string& name) const { return by_name_.count(name) > 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<std::size_t, Tensor<T>> grads_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(BackwardContext<T>&)>;

  Var constant(Tensor<T> value) { return push("constant", {}, std::move(value), nullptr, false, false, {}); }

  Var parameter(Tensor<T> value, std::string name) {
    return push("parameter", {}, std::move(value), nullptr, true, true, std::move(name));
  }

  Var record(std::string op, std::vector<Var> inputs, Tensor<T> out, BackwardFn fn) {
    bool rg = false;
    for (auto v : inputs) {
      MMDENSE_REQUIRE(v.id < nodes_.size(), Errc::invalid_argument, op + ": input node does not belong to this graph");
      rg = rg || nodes_[v.id].requires_grad;
    }
    return push(std::move(op), std::move(inputs), std::move(out), rg ? std::move(fn) : nullptr, rg, false, {});
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const std::vector<Var>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
  const std::string& op(Var v) const { return nodes_.at(v.id).op; }
  const std::string& name(Var v) const { return nodes_.at(v.id).name; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool is_parameter(Var v) const { return nodes_.at(v.id).trainable; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Drops a node's value once the caller no longer reads it. Only honoured
  /// while nothing in the graph requires gradients, since backward passes
  /// read saved values.
  void release(Var v) {
    if (!any_grad_ && v.id < nodes_.size() && nodes_[v.id].op != "constant") nodes_[v.id].value = Tensor<T>();
  }

  std::vector<Var> parameters() const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].trainable) out.push_back(Var{i});
    return out;
  }

  /// d(root)/d(leaf) for every trainable leaf. Leaves the root does not
  /// depend on receive zeros. The graph is not modified.
  GradMap<T> backward(Var root) const {
    MMDENSE_REQUIRE(root.id < nodes_.size(), Errc::invalid_argument, "backward: root not in graph");
    MMDENSE_REQUIRE(value(root).size() == 1, Errc::not_scalar,
            "backward root must be scalar, got shape " + to_string(value(root).shape()));
    std::vector<Tensor<T>> grads(nodes_.size());
    grads[root.id] = Tensor<T>(value(root).shape(), T(1));
    for (std::size_t i = root.id + 1; i-- > 0;) {
      const auto& n = nodes_[i];
      if (grads[i].empty() || !n.backward) continue;
      BackwardContext<T> ctx(*this, i, grads);
      n.backward(ctx);
      grads[i] = Tensor<T>();
    }
    GradMap<T> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].trainable) continue;
      auto g = grads[i].empty() ? Tensor<T>::zeros_like(nodes_[i].value) : std::move(grads[i]);
      out.insert(Var{i}, nodes_[i].name, std::move(g));
    }
    return out;
  }

 private:
  struct Node {
    std::string op;
    std::vector<Var> inputs;
    Tensor<T> value;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable = false;
    std::string name;
  };

  Var push(std::string op, std::vector<Var> inputs, Tensor<T> value, BackwardFn fn, bool rg, bool trainable,
           std::string name) {
    any_grad_ = any_grad_ || rg;
    nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(value), std::move(fn), rg, trainable,
                          std::move(name)});
    return Var{nodes_.size() - 1};
  }

  bool any_grad_ = false;
  std::deque<Node> nodes_;  // stable references: ops hold input values while recording
};

// ---------------------------------------------------------------------------
// Core ops

namespace detail {

// (outer, axis, inner) factorisation of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace detail

template <class T>
Var concat(Graph<T>& g, const std::vector<Var>& xs, std::size_t axis) {
  MMDENSE_REQUIRE(!xs.empty(), Errc::empty_input, "concat of an empty input list");
  const Shape& first = g.value(xs[0]).shape();
  MMDENSE_REQUIRE(axis < first.size(), Errc::invalid_argument,
          "concat axis " + std::to_string(axis) + " out of range for rank " + std::to_string(first.size()));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (auto v : xs) {
    const Shape& s = g.value(v).shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    MMDENSE_REQUIRE(ok, Errc::shape_mismatch, "concat along axis " + std::to_string(axis) + ": " + to_string(first) + " vs " + to_string(s));
    out_shape[axis] += s[axis];
  }
  if (xs.size() == 1) {
    return g.record("concat", xs, g.value(xs[0]), [](BackwardContext<T>& c) {
      auto& gi = c.input_grad(0);
      const auto& go = c.grad_out();
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    });
  }
  auto out = Tensor<T>::uninitialized(out_shape);
  const auto os = detail::split_at(out_shape, axis);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (auto v : xs) {
    const auto& x = g.value(v);
    const auto s = detail::split_at(x.shape(), axis);
    const std::size_t chunk = s.len * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(x.data() + o * chunk, chunk, out.data() + o * os.len * os.inner + offset * os.inner);
    offsets.push_back(offset);
    offset += s.len;
  }
  return g.record("concat", xs, std::move(out), [axis, offsets](BackwardContext<T>& c) {
    const auto& go = c.grad_out();
    const auto os = detail::split_at(go.shape(), axis);
    for (std::size_t k = 0; k < c.num_inputs(); ++k) {
      if (!c.needs_grad(k)) continue;
      auto& gi = c.input_grad(k);
      const auto s = detail::split_at(gi.shape(), axis);
      const std::size_t chunk = s.len * s.inner;
      for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = go.data() + o * os.len * os.inner + offsets[k] * os.inner;
        T* dst = gi.data() + o * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  });
}

/// Contiguous sub-range [start, start+len) of `axis`.
template <class T>
Var narrow(Graph<T>& g, Var x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto& xv = g.value(x);
  MMDENSE_REQUIRE(axis < xv.rank(), Errc::invalid_argument, "narrow axis out of range");
  MMDENSE_REQUIRE(len > 0 && start + len <= xv.dim(axis), Errc::shape_mismatch,
          "narrow [" + std::to_string(start) + ", " + std::to_string(start + len) + ") exceeds axis of size " +
              std::to_string(xv.dim(axis)));
  Shape os = xv.shape();
  os[axis] = len;
  auto out = Tensor<T>::uninitialized(os);
  const auto s = detail::split_at(xv.shape(), axis);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.data() + (o * s.len + start) * s.inner, len * s.inner, out.data() + o * len * s.inner);
  return g.record("narrow", {x}, std::move(out), [axis, start, len](BackwardContext<T>& c) {
    auto& gi = c.input_grad(0);
    const auto& go = c.grad_out();
    const auto s = detail::split_at(gi.shape(), axis);
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = gi.data() + (o * s.len + start) * s.inner;
      const T* src = go.data() + o * len * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  });
}

enum class Elementwise { add, sub, mul, relu, square };

namespace detail {

template <class T>
void require_same_shape(const Graph<T>& g, Var a, Var b, const char* op) {
  const auto& sa = g.value(a).shape();
  const auto& sb = g.value(b).shape();
  MMDENSE_REQUIRE(sa == sb, Errc::shape_mismatch, std::string(op) + ": " + to_string(sa) + " vs " + to_string(sb));
}

}  // namespace detail

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  detail::require_same_shape(g, a, b, "add");
  const auto& x = g.value(a);
  const auto& y = g.value(b);
  auto out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return g.record("add", {a, b}, std::move(out), [](BackwardContext<T>& c) {
    const auto& go = c.grad_out();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!c.needs_grad(k)) continue;
      auto& gi = c.input_grad(k);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    }
  });
}

template <class T>
Var sub(Graph<T>& g, Var a, Var b) {
  detail::require_same_shape(g, a, b, "sub");
  const auto& x = g.value(a);
  const auto& y = g.value(b);
  auto out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return g.record("sub", {a, b}, std::move(out), [](BackwardContext<T>& c) {
    const auto& go = c.grad_out();
    if (c.needs_grad(0)) {
      auto& gi = c.input_grad(0);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
    }
    if (c.needs_grad(1)) {
      auto& gi = c.input_grad(1);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] -= go[i];
    }
  });
}

template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
  detail::require_same_shape(g, a, b, "mul");
  const auto& x = g.value(a);
  const auto& y = g.value(b);
  auto out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return g.record("mul", {a, b}, std::move(out), [](BackwardContext<T>& c) {
    const auto& go = c.grad_out();
    if (c.needs_grad(0)) {
      auto& gi = c.input_grad(0);
      const auto& y = c.input(1);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * y[i];
    }
    if (c.needs_grad(1)) {
      auto& gi = c.input_grad(1);
      const auto& x = c.input(0);
      for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * x[i];
    }
  });
}

/// Scalar-with-tensor product; the only broadcast the engine supports.
template <class T>
Var scale(Graph<T>& g, Var a, T s) {
  const auto& x = g.value(a);
  auto out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return g.record("scale", {a}, std::move(out), [s](BackwardContext<T>& c) {
    auto& gi = c.input_grad(0);
    const auto& go = c.grad_out();
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * s;
  });
}

// Subgradient at exactly 0 is 0.
template <class T>
Var relu(Graph<T>& g, Var a) {
  const auto& x = g.value(a);
  auto out = Tensor<T>::uninitialized(x.shape());
  const T* xs = x.data();
  T* o = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) o[i] = std::max(xs[i], T(0));
  return g.record("relu", {a}, std::move(out), [](BackwardContext<T>& c) {
    auto& gi = c.input_grad(0);
    const auto& go = c.grad_out();
    const auto& x = c.input(0);
    const T* xs = x.data();
    const T* gs = go.data();
    T* d = gi.data();
    for (std::size_t i = 0; i < go.size(); ++i) d[i] += xs[i] > T(0) ? gs[i] : T(0);
  });
}

template <class T>
Var square(Graph<T>& g, Var a) {
  const auto& x = g.value(a);
  auto out = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  return g.record("square", {a}, std::move(out), [](BackwardContext<T>& c) {
    auto& gi = c.input_grad(0);
    const auto& go = c.grad_out();
    const auto& x = c.input(0);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += T(2) * x[i] * go[i];
  });
}

template <class T>
Var elementwise(Graph<T>& g, Elementwise op, Var a, Var b = {}) {
  const bool binary = op == Elementwise::add || op == Elementwise::sub || op == Elementwise::mul;
  MMDENSE_REQUIRE(binary == b.valid(), Errc::invalid_argument, "elementwise: wrong operand count for op");
  switch (op) {
    case Elementwise::add: return add(g, a, b);
    case Elementwise::sub: return sub(g, a, b);
    case Elementwise::mul: return mul(g, a, b);
    case Elementwise::relu: return relu(g, a);
    case Elementwise::square: return square(g, a);
  }
  fail(Errc::invalid_argument, "elementwise: unknown op");
}

template <class T>
Var reduce_mean(Graph<T>& g, Var a) {
  const auto& x = g.value(a);
  MMDENSE_REQUIRE(!x.empty(), Errc::empty_input, "mean of an empty tensor");
  double s = 0;
  for (auto v : x.values()) s += v;
  const std::size_t n = x.size();
  return g.record("mean", {a}, Tensor<T>::scalar(T(s / double(n))), [n](BackwardContext<T>& c) {
    auto& gi = c.input_grad(0);
    const T d = c.grad_out()[0] / T(n);
    for (auto& v : gi.values()) v += d;
  });
}

}  // namespace mmdense
