#pragma once

// Define-by-run reverse-mode differentiation over dense double tensors.
//
// A Tensor is a shared handle onto a graph node. Operations record a node
// (with its backward rule) whenever any input requires a gradient and
// recording is enabled. backward() walks the recorded graph once in reverse
// topological order and then releases it; leaf gradients accumulate until
// zero_grad() is called.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kws/error.hpp"
#include "kws/random.hpp"

namespace kws::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " given " + std::to_string(values.size()) + " values");
    }
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return from(std::move(shape), std::vector<double>(n, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Writes bypass the graph; only meant for leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->value; }
  double item() const {
    if (size() != 1) throw UsageError("item() on a tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double at(std::size_t flat) const { return node_->value.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient, or an empty span when nothing has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no history, no gradient requirement.
  Tensor detach() const { return from(shape(), node_->value, false); }
  /// Independent copy of the values that keeps requires_grad.
  Tensor clone() const { return from(shape(), node_->value, requires_grad()); }

  Node& node() const { return *node_; }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

/// Records `value` as the output of `op`. The backward rule receives the
/// output node (whose grad is populated) and must accumulate into inputs.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  if (detail::grad_mode()) {
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

/// Accumulates into input i of `out` when that input wants a gradient.
inline std::vector<double>* input_grad(Node& out, std::size_t i) {
  Node& in = *out.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

// ---------------------------------------------------------------------------
// Broadcasting

namespace detail {

inline Shape broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` viewed at rank `out.size()`, zero along broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    const std::size_t oi = i + (r - s.size());
    strides[oi] = s[i] == 1 ? 0 : stride;
    stride *= s[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) over every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t r = out.size();
  const std::size_t total = numel(out);
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  // Innermost axis handled as a tight loop.
  const std::size_t inner = out[r - 1];
  const std::size_t ia = sa[r - 1], ib = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(base + k, oa + k * ia, ob + k * ib);
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < out[ax]) break;
      oa -= sa[ax] * idx[ax];
      ob -= sb[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    return make_result(op, a.shape(), std::move(out), {a, b}, [bwd, n](Node& self) {
      const auto& av = self.inputs[0]->value;
      const auto& bv = self.inputs[1]->value;
      auto* ga = input_grad(self, 0);
      auto* gb = input_grad(self, 1);
      for (std::size_t i = 0; i < n; ++i) {
        const auto [da, db] = bwd(av[i], bv[i], self.value[i], self.grad[i]);
        if (ga) (*ga)[i] += da;
        if (gb) (*gb)[i] += db;
      }
    });
  }
  Shape shape = broadcast_shapes(op, a.shape(), b.shape());
  auto sa = broadcast_strides(a.shape(), shape);
  auto sb = broadcast_strides(b.shape(), shape);
  std::vector<double> out(numel(shape));
  const auto av = a.data();
  const auto bv = b.data();
  for_each_broadcast(shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
  return make_result(op, shape, std::move(out), {a, b}, [bwd, sa, sb](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    auto* ga = input_grad(self, 0);
    auto* gb = input_grad(self, 1);
    for_each_broadcast(self.shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
      const auto [da, db] = bwd(av[i], bv[j], self.value[o], self.grad[o]);
      if (ga) (*ga)[i] += da;
      if (gb) (*gb)[j] += db;
    });
  });
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* op, const Tensor& x, Fwd fwd, Bwd bwd) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(xv[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [bwd, n](Node& self) {
    auto* gx = input_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < n; ++i) (*gx)[i] += bwd(xv[i], self.value[i]) * self.grad[i];
  });
}

// (outer, axis, inner) factorization of a shape around `axis`.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double, double g) { return std::pair{g, g}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double, double g) { return std::pair{g, -g}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double, double g) { return std::pair{g * y, g * x}; });
}

/// Elementwise max; on ties the gradient goes to `a`.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "maximum", a, b, [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double, double g) { return x >= y ? std::pair{g, 0.0} : std::pair{0.0, g}; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_op(
      "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// ---------------------------------------------------------------------------
// Shape primitives

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  }
  return make_result("reshape", std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                     [](Node& self) {
                       auto* gx = input_grad(self, 0);
                       if (!gx) return;
                       for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
                     });
}

/// General axis permutation: out.shape[i] = x.shape[axes[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeError("permute: axes do not match rank of " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw ShapeError("permute: invalid axis list");
    seen[a] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r), gather(r);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_strides[i] = s;
    s *= x.dim(i);
  }
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(axes[i]);
    gather[i] = in_strides[axes[i]];
  }
  // Precomputed source offset for each output element.
  std::vector<std::size_t> src(x.size());
  const std::vector<std::size_t> zero(r, 0);
  detail::for_each_broadcast(out_shape, gather, zero, [&](std::size_t o, std::size_t i, std::size_t) { src[o] = i; });
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[src[o]];
  return make_result("permute", out_shape, std::move(out), {x}, [src = std::move(src)](Node& self) {
    auto* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < src.size(); ++o) (*gx)[src[o]] += self.grad[o];
  });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  const Shape check = detail::broadcast_shapes("broadcast_to", x.shape(), shape);
  if (check != shape) throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto sx = detail::broadcast_strides(x.shape(), shape);
  const std::vector<std::size_t> zero(shape.size(), 0);
  std::vector<double> out(numel(shape));
  const auto xv = x.data();
  detail::for_each_broadcast(shape, sx, zero, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = xv[i]; });
  return make_result("broadcast_to", shape, std::move(out), {x}, [sx, zero](Node& self) {
    auto* gx = input_grad(self, 0);
    if (!gx) return;
    detail::for_each_broadcast(self.shape, sx, zero,
                               [&](std::size_t o, std::size_t i, std::size_t) { (*gx)[i] += self.grad[o]; });
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size() && axis < first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i) ok = i == axis || p.dim(i) == first[i];
    if (!ok) throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(first));
    lens.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  const auto v = detail::axis_view(out_shape, axis, "concat");
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto src = parts[p].data();
    const std::size_t block = lens[p] * v.inner;
    for (std::size_t o = 0; o < v.outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * v.inner + offset * v.inner));
    }
    offset += lens[p];
  }
  return make_result("concat", out_shape, std::move(out), parts, [lens, v, total](Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < lens.size(); ++p) {
      const std::size_t block = lens[p] * v.inner;
      if (auto* g = input_grad(self, p)) {
        for (std::size_t o = 0; o < v.outer; ++o) {
          const double* src = self.grad.data() + o * total * v.inner + offset * v.inner;
          double* dst = g->data() + o * block;
          for (std::size_t k = 0; k < block; ++k) dst[k] += src[k];
        }
      }
      offset += lens[p];
    }
  });
}

/// Elements [start, start + len) along `axis`; the axis is kept.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto v = detail::axis_view(x.shape(), axis, "slice");
  if (len == 0 || start + len > v.len) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + len) + ") out of range for " +
                     shape_str(x.shape()) + " axis " + std::to_string(axis));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::vector<double> out(numel(out_shape));
  const auto xv = x.data();
  const std::size_t block = len * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * v.len + start) * v.inner), block,
                out.begin() + static_cast<std::ptrdiff_t>(o * block));
  }
  return make_result("slice", out_shape, std::move(out), {x}, [v, start, block](Node& self) {
    auto* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < v.outer; ++o) {
      double* dst = gx->data() + (o * v.len + start) * v.inner;
      const double* src = self.grad.data() + o * block;
      for (std::size_t k = 0; k < block; ++k) dst[k] += src[k];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false) {
  const auto v = detail::axis_view(x.shape(), axis, "sum");
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out_shape.empty()) out_shape = {1};
  }
  std::vector<double> out(v.outer * v.inner, 0.0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t l = 0; l < v.len; ++l)
      for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += xv[(o * v.len + l) * v.inner + i];
  return make_result("sum", out_shape, std::move(out), {x}, [v](Node& self) {
    auto* gx = input_grad(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t l = 0; l < v.len; ++l)
        for (std::size_t i = 0; i < v.inner; ++i) (*gx)[(o * v.len + l) * v.inner + i] += self.grad[o * v.inner + i];
  });
}

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result("sum_all", {1}, {total}, {x}, [](Node& self) {
    auto* gx = input_grad(self, 0);
    if (!gx) return;
    for (double& g : *gx) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false) {
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Softmax along `axis`, computed with the row max subtracted.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto v = detail::axis_view(x.shape(), axis, "softmax");
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.len * v.inner + i;
      double mx = xv[base];
      for (std::size_t l = 1; l < v.len; ++l) mx = std::max(mx, xv[base + l * v.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) {
        const double e = std::exp(xv[base + l * v.inner] - mx);
        out[base + l * v.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] /= z;
    }
  }
  return make_result("softmax", x.shape(), std::move(out), {x}, [v](Node& self) {
    auto* gx = input_grad(self, 0);
    if (!gx) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.len * v.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < v.len; ++l) dot += g[base + l * v.inner] * y[base + l * v.inner];
        for (std::size_t l = 0; l < v.len; ++l) {
          const std::size_t k = base + l * v.inner;
          (*gx)[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix product

namespace detail {
// c[m x n] += a[m x k] * b[k x n]
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
// c[m x n] += a^T * b, a stored [k x m]
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
// c[m x n] += a * b^T, b stored [n x k]
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* ga = input_grad(self, 0)) detail::gemm_nt_acc(self.grad.data(), bv.data(), ga->data(), m, n, k);
    if (auto* gb = input_grad(self, 1)) detail::gemm_tn_acc(av.data(), self.grad.data(), gb->data(), k, m, n);
  });
}

// ---------------------------------------------------------------------------
// Backpropagation

/// Accumulates d(loss)/d(t) into every tensor reachable from `loss` that
/// requires a gradient, then releases the recorded graph.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) throw UsageError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{&loss.node(), 0}};
  visited.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (Node* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->inputs.clear();
      node->grad.clear();
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference checking

struct GradCheckOptions {
  double eps = 1e-5;
  // When nonzero, only this many randomly chosen elements are probed.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
};

/// Central-difference check of backward() against `f` at the current values
/// of `params`. Returns max |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, GradCheckOptions opt = {}) {
  for (auto& p : params) p.zero_grad();
  backward(f());

  std::vector<std::pair<std::size_t, std::size_t>> probes;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].size(); ++i) probes.emplace_back(p, i);
  if (opt.max_elements && probes.size() > opt.max_elements) {
    Rng rng(opt.seed);
    rng.shuffle(std::span(probes));
    probes.resize(opt.max_elements);
  }

  double worst = 0.0;
  NoGradGuard no_grad;
  for (const auto& [p, i] : probes) {
    auto values = params[p].mutable_data();
    const double analytic = params[p].has_grad() ? params[p].grad()[i] : 0.0;
    const double saved = values[i];
    values[i] = saved + opt.eps;
    const double up = f().item();
    values[i] = saved - opt.eps;
    const double down = f().item();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * opt.eps);
    const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace kws::ad
