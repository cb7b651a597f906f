// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Every differentiable quantity in the library (logits, probabilities,
// losses, gate values) is a TensorT<S>. Ops build an implicit graph of
// shared nodes; backward() walks it once in reverse topological order and
// accumulates gradients into every reachable tensor that requires them.
// Gradients persist across backward calls until zero_grad().
//
// S = float for training, double for finite-difference gradient checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "distillab/common.hpp"

namespace distillab {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

enum class OpKind {
  leaf,
  matmul,
  add,
  mul,
  scale,
  transpose,
  reshape,
  concat,
  embedding_gather,
  softmax,
  log_softmax,
  layer_norm,
  relu,
  dropout,
  sum,
  mean,
  masked_fill,
  sigmoid,
  exp,
  log,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::concat: return "concat";
    case OpKind::embedding_gather: return "embedding-gather";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log-softmax";
    case OpKind::layer_norm: return "layer-norm";
    case OpKind::relu: return "relu";
    case OpKind::dropout: return "dropout";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::masked_fill: return "masked-fill";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
  }
  return "?";
}

namespace detail {

inline thread_local bool grad_mode = true;

template <class S>
struct Node {
  OpKind op = OpKind::leaf;
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  bool is_leaf() const { return parents.empty() && !backprop; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

}  // namespace detail

// Disables graph recording in scope; forwards run, nothing becomes
// differentiable. Used for teacher passes and decoding.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::grad_mode; }

// Token-id matrix (batch x len). Not differentiable.
struct IdMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<int32_t> v;

  IdMatrix() = default;
  IdMatrix(int64_t r, int64_t c, int32_t fill = 0)
      : rows(r), cols(c), v(static_cast<size_t>(r * c), fill) {}

  int32_t& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
  int32_t at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
};

// Byte mask aligned to a tensor shape; 1 selects a position.
struct ByteMask {
  Shape shape;
  std::vector<uint8_t> v;

  ByteMask() = default;
  explicit ByteMask(Shape s, uint8_t fill = 0)
      : shape(std::move(s)), v(static_cast<size_t>(numel_of(shape)), fill) {}
};

template <class S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;

  static TensorT from(Shape shape, std::vector<S> data) {
    if (numel_of(shape) != static_cast<int64_t>(data.size())) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    }
    TensorT t;
    t.n_ = std::make_shared<detail::Node<S>>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    return t;
  }

  static TensorT full(Shape shape, S fill) {
    auto n = numel_of(shape);
    return from(std::move(shape), std::vector<S>(static_cast<size_t>(n), fill));
  }

  static TensorT zeros(Shape shape) { return full(std::move(shape), S(0)); }
  static TensorT ones(Shape shape) { return full(std::move(shape), S(1)); }
  static TensorT scalar(S v) { return from({1}, {v}); }

  static TensorT uniform(Shape shape, Rng& rng, S lo, S hi) {
    auto n = numel_of(shape);
    std::vector<S> d(static_cast<size_t>(n));
    std::uniform_real_distribution<double> u(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& x : d) x = static_cast<S>(u(rng));
    return from(std::move(shape), std::move(d));
  }

  static TensorT normal(Shape shape, Rng& rng, S mean, S stddev) {
    auto n = numel_of(shape);
    std::vector<S> d(static_cast<size_t>(n));
    std::normal_distribution<double> g(static_cast<double>(mean), static_cast<double>(stddev));
    for (auto& x : d) x = static_cast<S>(g(rng));
    return from(std::move(shape), std::move(d));
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int64_t ndim() const { return static_cast<int64_t>(n_->shape.size()); }
  int64_t dim(int64_t i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return n_->numel(); }

  const std::vector<S>& values() const { return n_->value; }
  std::vector<S>& values_mutable() { return n_->value; }

  S item() const {
    if (numel() != 1) throw ValueError("item: tensor has " + std::to_string(numel()) + " elements");
    return n_->value[0];
  }

  S at(std::initializer_list<int64_t> idx) const {
    int64_t flat = 0;
    size_t i = 0;
    for (int64_t ix : idx) {
      flat = flat * n_->shape[i] + ix;
      ++i;
    }
    return n_->value[static_cast<size_t>(flat)];
  }

  bool requires_grad() const { return n_->requires_grad; }
  TensorT& set_requires_grad(bool b) {
    n_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (n_->grad.empty()) throw ValueError("grad: no gradient present");
    return n_->grad;
  }
  std::vector<S>& grad_mutable() {
    n_->ensure_grad();
    return n_->grad;
  }

  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
  }

  // Value copy cut loose from the graph.
  TensorT detach() const {
    TensorT t = from(n_->shape, n_->value);
    return t;
  }

  // Reverse-mode sweep from a scalar loss. Transient (non-leaf) gradients
  // are reset per call; leaf gradients accumulate until zero_grad().
  void backward() const {
    if (!n_) throw ValueError("backward: undefined tensor");
    if (numel() != 1) {
      throw ValueError("backward requires a scalar loss, got shape " + shape_str(n_->shape));
    }
    if (!n_->requires_grad) {
      throw ValueError("backward on a detached graph: loss does not require grad");
    }
    std::vector<detail::Node<S>*> order;
    std::unordered_set<detail::Node<S>*> seen;
    struct Frame {
      detail::Node<S>* n;
      size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        detail::Node<S>* p = f.n->parents[f.next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
    for (detail::Node<S>* node : order) {
      if (!node->is_leaf()) node->grad.assign(node->value.size(), S(0));
    }
    n_->ensure_grad();
    n_->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<S>* node = *it;
      if (node->backprop) node->backprop(*node);
    }
  }

  std::shared_ptr<detail::Node<S>> node() const { return n_; }

 private:
  std::shared_ptr<detail::Node<S>> n_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

template <class S>
void check_defined(const TensorT<S>& t, const char* op) {
  if (!t.defined()) throw ValueError(std::string(op) + ": undefined tensor input");
}

template <class S>
void check_finite(const TensorT<S>& t, const char* op) {
  for (S x : t.values()) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw ValueError(std::string(op) + ": non-finite input value");
    }
  }
}

template <class S>
TensorT<S> make_result(OpKind op, Shape shape, std::vector<S> value) {
  TensorT<S> t = TensorT<S>::from(std::move(shape), std::move(value));
  t.node()->op = op;
  return t;
}

// Wires parents + backprop onto the result when recording is on and any
// input participates in the graph.
template <class S>
void record(TensorT<S>& out, std::vector<TensorT<S>> inputs,
            std::function<void(Node<S>&)> backprop) {
  if (!grad_mode) return;
  bool any = false;
  for (const auto& in : inputs) {
    if (in.requires_grad()) any = true;
  }
  if (!any) return;
  out.node()->requires_grad = true;
  for (auto& in : inputs) out.node()->parents.push_back(in.node());
  out.node()->backprop = std::move(backprop);
}

template <class S>
void accumulate(const std::shared_ptr<Node<S>>& p, const std::vector<S>& contrib) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  for (size_t i = 0; i < contrib.size(); ++i) p->grad[i] += contrib[i];
}

// C += A(MxK) * B(KxN)
template <class S>
void mm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const S aik = arow[kk];
      const S* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C += A(MxN) * B(KxN)^T  -> (MxK)
template <class S>
void mm_nt(const S* a, const S* b, S* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * n;
    S* crow = c + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const S* brow = b + kk * n;
      S acc = 0;
      for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[kk] += acc;
    }
  }
}

// C += A(MxK)^T * B(MxN)  -> (KxN)
template <class S>
void mm_tn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      const S aik = arow[kk];
      S* crow = c + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

// matmul supports (M,K)x(K,N), (B,M,K)x(K,N) and (B,M,K)x(B,K,N).
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_defined(a, "matmul");
  detail::check_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  int64_t batch = 1, m = 0, k = 0, n = 0;
  bool a3 = sa.size() == 3, b3 = sb.size() == 3;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0];
    k = sa[1];
    n = sb[1];
    if (sb[0] != k) {
      throw ShapeError(std::string("matmul: inner dims disagree, ") + shape_str(sa) + " x " +
                       shape_str(sb));
    }
  } else if (a3 && sb.size() == 2) {
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[1];
    if (sb[0] != k) {
      throw ShapeError(std::string("matmul: inner dims disagree, ") + shape_str(sa) + " x " +
                       shape_str(sb));
    }
  } else if (a3 && b3) {
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    if (sb[0] != batch || sb[1] != k) {
      throw ShapeError(std::string("matmul: batched shapes disagree, ") + shape_str(sa) + " x " +
                       shape_str(sb));
    }
  } else {
    throw ShapeError(std::string("matmul: unsupported ranks ") + shape_str(sa) + " x " +
                     shape_str(sb));
  }
  detail::check_finite(a, "matmul");
  detail::check_finite(b, "matmul");

  Shape out_shape = a3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<S> out(static_cast<size_t>(batch * m * n), S(0));
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  for (int64_t bi = 0; bi < batch; ++bi) {
    detail::mm_nn(pa + bi * m * k, b3 ? pb + bi * k * n : pb, out.data() + bi * m * n, m, k, n);
  }
  TensorT<S> y = detail::make_result(OpKind::matmul, std::move(out_shape), std::move(out));
  detail::record<S>(y, {a, b}, [a, b, batch, m, k, n, b3](detail::Node<S>& nd) {
    const S* gy = nd.grad.data();
    const S* pa2 = a.values().data();
    const S* pb2 = b.values().data();
    if (a.requires_grad()) {
      std::vector<S> ga(a.values().size(), S(0));
      for (int64_t bi = 0; bi < batch; ++bi) {
        detail::mm_nt(gy + bi * m * n, b3 ? pb2 + bi * k * n : pb2, ga.data() + bi * m * k, m, n,
                      k);
      }
      detail::accumulate(a.node(), ga);
    }
    if (b.requires_grad()) {
      std::vector<S> gb(b.values().size(), S(0));
      if (b3) {
        for (int64_t bi = 0; bi < batch; ++bi) {
          detail::mm_tn(pa2 + bi * m * k, gy + bi * m * n, gb.data() + bi * k * n, m, k, n);
        }
      } else {
        // fold batch into rows
        detail::mm_tn(pa2, gy, gb.data(), batch * m, k, n);
      }
      detail::accumulate(b.node(), gb);
    }
  });
  return y;
}

// add: identical shapes, or b is a 1-D bias broadcast over the trailing dim.
template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_defined(a, "add");
  detail::check_defined(b, "add");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool bias = false;
  if (sa == sb) {
    bias = false;
  } else if (sb.size() == 1 && !sa.empty() && sb[0] == sa.back()) {
    bias = true;
  } else {
    throw ShapeError(std::string("add: shapes ") + shape_str(sa) + " and " + shape_str(sb) +
                     " neither match nor form a trailing bias");
  }
  detail::check_finite(a, "add");
  detail::check_finite(b, "add");
  std::vector<S> out(a.values());
  if (bias) {
    int64_t d = sb[0];
    int64_t rows = a.numel() / d;
    const S* pb = b.values().data();
    for (int64_t r = 0; r < rows; ++r) {
      S* prow = out.data() + r * d;
      for (int64_t j = 0; j < d; ++j) prow[j] += pb[j];
    }
  } else {
    const S* pb = b.values().data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  }
  TensorT<S> y = detail::make_result(OpKind::add, sa, std::move(out));
  detail::record<S>(y, {a, b}, [a, b, bias](detail::Node<S>& nd) {
    if (a.requires_grad()) detail::accumulate(a.node(), nd.grad);
    if (b.requires_grad()) {
      if (!bias) {
        detail::accumulate(b.node(), nd.grad);
      } else {
        int64_t d = b.numel();
        int64_t rows = nd.numel() / d;
        std::vector<S> gb(static_cast<size_t>(d), S(0));
        for (int64_t r = 0; r < rows; ++r) {
          const S* g = nd.grad.data() + r * d;
          for (int64_t j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += g[j];
        }
        detail::accumulate(b.node(), gb);
      }
    }
  });
  return y;
}

// Elementwise product, identical shapes only.
template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_defined(a, "mul");
  detail::check_defined(b, "mul");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string("mul: shapes differ, ") + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  detail::check_finite(a, "mul");
  detail::check_finite(b, "mul");
  std::vector<S> out(a.values());
  const S* pb = b.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  TensorT<S> y = detail::make_result(OpKind::mul, a.shape(), std::move(out));
  detail::record<S>(y, {a, b}, [a, b](detail::Node<S>& nd) {
    if (a.requires_grad()) {
      std::vector<S> g(nd.grad);
      const S* pb2 = b.values().data();
      for (size_t i = 0; i < g.size(); ++i) g[i] *= pb2[i];
      detail::accumulate(a.node(), g);
    }
    if (b.requires_grad()) {
      std::vector<S> g(nd.grad);
      const S* pa2 = a.values().data();
      for (size_t i = 0; i < g.size(); ++i) g[i] *= pa2[i];
      detail::accumulate(b.node(), g);
    }
  });
  return y;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S s) {
  detail::check_defined(a, "scale");
  if (!std::isfinite(static_cast<double>(s))) throw ValueError("scale: non-finite factor");
  detail::check_finite(a, "scale");
  std::vector<S> out(a.values());
  for (auto& x : out) x *= s;
  TensorT<S> y = detail::make_result(OpKind::scale, a.shape(), std::move(out));
  detail::record<S>(y, {a}, [a, s](detail::Node<S>& nd) {
    std::vector<S> g(nd.grad);
    for (auto& x : g) x *= s;
    detail::accumulate(a.node(), g);
  });
  return y;
}

namespace detail {

// out = in with axes i<j swapped; loops decompose the index into
// (outer, a, mid, b, inner) blocks around the two axes.
template <class S>
void swap_axes_copy(const S* in, S* out, const Shape& shape, size_t i, size_t j) {
  int64_t outer = 1, mid = 1, inner = 1;
  for (size_t k = 0; k < i; ++k) outer *= shape[k];
  for (size_t k = i + 1; k < j; ++k) mid *= shape[k];
  for (size_t k = j + 1; k < shape.size(); ++k) inner *= shape[k];
  const int64_t di = shape[i], dj = shape[j];
  // input strides
  const int64_t s_b = inner;
  const int64_t s_m = dj * inner;
  const int64_t s_a = mid * s_m;
  const int64_t s_o = di * s_a;
  // output strides (a and b trade places)
  const int64_t t_a = inner;
  const int64_t t_m = di * inner;
  const int64_t t_b = mid * t_m;
  const int64_t t_o = dj * t_b;
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t a = 0; a < di; ++a) {
      for (int64_t m = 0; m < mid; ++m) {
        for (int64_t b = 0; b < dj; ++b) {
          const S* src = in + o * s_o + a * s_a + m * s_m + b * s_b;
          S* dst = out + o * t_o + b * t_b + m * t_m + a * t_a;
          std::copy(src, src + inner, dst);
        }
      }
    }
  }
}

}  // namespace detail

// Swap two axes; defaults to the last two (matrix transpose per batch).
template <class S>
TensorT<S> transpose(const TensorT<S>& a, int64_t axis0 = -2, int64_t axis1 = -1) {
  detail::check_defined(a, "transpose");
  const int64_t nd = a.ndim();
  if (nd < 2) {
    throw ShapeError(std::string("transpose: needs rank >= 2, got ") + shape_str(a.shape()));
  }
  if (axis0 < 0) axis0 += nd;
  if (axis1 < 0) axis1 += nd;
  if (axis0 < 0 || axis0 >= nd || axis1 < 0 || axis1 >= nd || axis0 == axis1) {
    throw ShapeError("transpose: bad axes " + std::to_string(axis0) + "," + std::to_string(axis1) +
                     " for " + shape_str(a.shape()));
  }
  detail::check_finite(a, "transpose");
  size_t i = static_cast<size_t>(std::min(axis0, axis1));
  size_t j = static_cast<size_t>(std::max(axis0, axis1));
  Shape s = a.shape();
  std::swap(s[i], s[j]);
  std::vector<S> out(a.values().size());
  detail::swap_axes_copy(a.values().data(), out.data(), a.shape(), i, j);
  TensorT<S> y = detail::make_result(OpKind::transpose, std::move(s), std::move(out));
  detail::record<S>(y, {a}, [a, i, j](detail::Node<S>& nd) {
    std::vector<S> g(a.values().size());
    detail::swap_axes_copy(nd.grad.data(), g.data(), nd.shape, i, j);
    detail::accumulate(a.node(), g);
  });
  return y;
}

template <class S>
TensorT<S> reshape(const TensorT<S>& a, Shape target) {
  detail::check_defined(a, "reshape");
  if (numel_of(target) != a.numel()) {
    throw ShapeError(std::string("reshape: ") + shape_str(a.shape()) + " -> " + shape_str(target) +
                     " changes element count");
  }
  detail::check_finite(a, "reshape");
  TensorT<S> y = detail::make_result(OpKind::reshape, std::move(target), a.values());
  detail::record<S>(y, {a}, [a](detail::Node<S>& nd) { detail::accumulate(a.node(), nd.grad); });
  return y;
}

template <class S>
TensorT<S> concat(const TensorT<S>& a, const TensorT<S>& b, int64_t axis) {
  detail::check_defined(a, "concat");
  detail::check_defined(b, "concat");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || axis < 0 || axis >= static_cast<int64_t>(sa.size())) {
    throw ShapeError(std::string("concat: rank/axis mismatch, ") + shape_str(sa) + " and " +
                     shape_str(sb) + " axis " + std::to_string(axis));
  }
  for (size_t i = 0; i < sa.size(); ++i) {
    if (static_cast<int64_t>(i) != axis && sa[i] != sb[i]) {
      throw ShapeError(std::string("concat: non-axis dims differ, ") + shape_str(sa) + " and " +
                       shape_str(sb));
    }
  }
  detail::check_finite(a, "concat");
  detail::check_finite(b, "concat");
  Shape out_shape = sa;
  out_shape[static_cast<size_t>(axis)] += sb[static_cast<size_t>(axis)];
  int64_t inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < sa.size(); ++i) inner *= sa[i];
  int64_t outer = 1;
  for (size_t i = 0; i < static_cast<size_t>(axis); ++i) outer *= sa[i];
  int64_t block_a = sa[static_cast<size_t>(axis)] * inner;
  int64_t block_b = sb[static_cast<size_t>(axis)] * inner;
  std::vector<S> out(static_cast<size_t>(outer * (block_a + block_b)));
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy(pa + o * block_a, pa + (o + 1) * block_a, out.data() + o * (block_a + block_b));
    std::copy(pb + o * block_b, pb + (o + 1) * block_b,
              out.data() + o * (block_a + block_b) + block_a);
  }
  TensorT<S> y = detail::make_result(OpKind::concat, std::move(out_shape), std::move(out));
  detail::record<S>(y, {a, b}, [a, b, outer, block_a, block_b](detail::Node<S>& nd) {
    const S* gy = nd.grad.data();
    if (a.requires_grad()) {
      std::vector<S> g(a.values().size());
      for (int64_t o = 0; o < outer; ++o) {
        std::copy(gy + o * (block_a + block_b), gy + o * (block_a + block_b) + block_a,
                  g.data() + o * block_a);
      }
      detail::accumulate(a.node(), g);
    }
    if (b.requires_grad()) {
      std::vector<S> g(b.values().size());
      for (int64_t o = 0; o < outer; ++o) {
        std::copy(gy + o * (block_a + block_b) + block_a, gy + (o + 1) * (block_a + block_b),
                  g.data() + o * block_b);
      }
      detail::accumulate(b.node(), g);
    }
  });
  return y;
}

// Row gather: table (V,d) indexed by ids (B,L) -> (B,L,d).
template <class S>
TensorT<S> embedding(const TensorT<S>& table, const IdMatrix& ids) {
  detail::check_defined(table, "embedding-gather");
  if (table.ndim() != 2) {
    throw ShapeError(std::string("embedding-gather: table must be (V,d), got ") +
                     shape_str(table.shape()));
  }
  detail::check_finite(table, "embedding-gather");
  int64_t vocab = table.dim(0), d = table.dim(1);
  for (int32_t id : ids.v) {
    if (id < 0 || id >= vocab) {
      throw ValueError("embedding-gather: id " + std::to_string(id) + " out of range [0," +
                       std::to_string(vocab) + ")");
    }
  }
  std::vector<S> out(static_cast<size_t>(ids.rows * ids.cols * d));
  const S* pt = table.values().data();
  for (int64_t i = 0; i < ids.rows * ids.cols; ++i) {
    const S* src = pt + static_cast<int64_t>(ids.v[static_cast<size_t>(i)]) * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  TensorT<S> y = detail::make_result(OpKind::embedding_gather, {ids.rows, ids.cols, d},
                                     std::move(out));
  IdMatrix ids_copy = ids;
  detail::record<S>(y, {table}, [table, ids_copy, d](detail::Node<S>& nd) {
    std::vector<S> g(table.values().size(), S(0));
    const S* gy = nd.grad.data();
    for (int64_t i = 0; i < ids_copy.rows * ids_copy.cols; ++i) {
      S* dst = g.data() + static_cast<int64_t>(ids_copy.v[static_cast<size_t>(i)]) * d;
      const S* src = gy + i * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    detail::accumulate(table.node(), g);
  });
  return y;
}

namespace detail {

template <class S>
void softmax_rows(const S* x, S* y, int64_t rows, int64_t d) {
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x + r * d;
    S* yr = y + r * d;
    S m = xr[0];
    for (int64_t j = 1; j < d; ++j) m = std::max(m, xr[j]);
    S sum = 0;
    for (int64_t j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - m);
      sum += yr[j];
    }
    for (int64_t j = 0; j < d; ++j) yr[j] /= sum;
  }
}

}  // namespace detail

// softmax over the trailing dim, max-subtracted for stability.
template <class S>
TensorT<S> softmax(const TensorT<S>& a) {
  detail::check_defined(a, "softmax");
  if (a.ndim() < 1) throw ShapeError("softmax: rank >= 1 required");
  detail::check_finite(a, "softmax");
  int64_t d = a.shape().back();
  int64_t rows = a.numel() / d;
  std::vector<S> out(a.values().size());
  detail::softmax_rows(a.values().data(), out.data(), rows, d);
  TensorT<S> y = detail::make_result(OpKind::softmax, a.shape(), std::move(out));
  detail::record<S>(y, {a}, [a, rows, d](detail::Node<S>& nd) {
    std::vector<S> g(a.values().size());
    const S* gy = nd.grad.data();
    const S* py = nd.value.data();
    for (int64_t r = 0; r < rows; ++r) {
      const S* gr = gy + r * d;
      const S* yr = py + r * d;
      S dot = 0;
      for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
      S* out_r = g.data() + r * d;
      for (int64_t j = 0; j < d; ++j) out_r[j] = yr[j] * (gr[j] - dot);
    }
    detail::accumulate(a.node(), g);
  });
  return y;
}

template <class S>
TensorT<S> log_softmax(const TensorT<S>& a) {
  detail::check_defined(a, "log-softmax");
  if (a.ndim() < 1) throw ShapeError("log-softmax: rank >= 1 required");
  detail::check_finite(a, "log-softmax");
  int64_t d = a.shape().back();
  int64_t rows = a.numel() / d;
  std::vector<S> out(a.values().size());
  const S* px = a.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * d;
    S* yr = out.data() + r * d;
    S m = xr[0];
    for (int64_t j = 1; j < d; ++j) m = std::max(m, xr[j]);
    S sum = 0;
    for (int64_t j = 0; j < d; ++j) sum += std::exp(xr[j] - m);
    S lse = m + std::log(sum);
    for (int64_t j = 0; j < d; ++j) yr[j] = xr[j] - lse;
  }
  TensorT<S> y = detail::make_result(OpKind::log_softmax, a.shape(), std::move(out));
  detail::record<S>(y, {a}, [a, rows, d](detail::Node<S>& nd) {
    std::vector<S> g(a.values().size());
    const S* gy = nd.grad.data();
    const S* py = nd.value.data();
    for (int64_t r = 0; r < rows; ++r) {
      const S* gr = gy + r * d;
      const S* yr = py + r * d;
      S gsum = 0;
      for (int64_t j = 0; j < d; ++j) gsum += gr[j];
      S* out_r = g.data() + r * d;
      for (int64_t j = 0; j < d; ++j) out_r[j] = gr[j] - std::exp(yr[j]) * gsum;
    }
    detail::accumulate(a.node(), g);
  });
  return y;
}

// Normalizes the trailing dim, then applies gamma/beta. Biased variance,
// zero-variance rows map to zeros pre-affine.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps = S(1e-5)) {
  detail::check_defined(x, "layer-norm");
  detail::check_defined(gamma, "layer-norm");
  detail::check_defined(beta, "layer-norm");
  int64_t d = x.shape().back();
  if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 || beta.dim(0) != d) {
    throw ShapeError(std::string("layer-norm: gamma/beta must be (") + std::to_string(d) +
                     "), got " + shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  detail::check_finite(x, "layer-norm");
  detail::check_finite(gamma, "layer-norm");
  detail::check_finite(beta, "layer-norm");
  int64_t rows = x.numel() / d;
  std::vector<S> out(x.values().size());
  std::vector<S> xhat(x.values().size());
  std::vector<S> inv_std(static_cast<size_t>(rows));
  const S* px = x.values().data();
  const S* pg = gamma.values().data();
  const S* pb = beta.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = px + r * d;
    S mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<S>(d);
    S var = 0;
    for (int64_t j = 0; j < d; ++j) {
      S c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<S>(d);
    S inv = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = inv;
    S* hr = xhat.data() + r * d;
    S* yr = out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mean) * inv;
      yr[j] = pg[j] * hr[j] + pb[j];
    }
  }
  TensorT<S> y = detail::make_result(OpKind::layer_norm, x.shape(), std::move(out));
  detail::record<S>(
      y, {x, gamma, beta},
      [x, gamma, beta, rows, d, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::Node<S>& nd) {
        const S* gy = nd.grad.data();
        const S* pg2 = gamma.values().data();
        if (gamma.requires_grad() || beta.requires_grad()) {
          std::vector<S> ggam(static_cast<size_t>(d), S(0));
          std::vector<S> gbet(static_cast<size_t>(d), S(0));
          for (int64_t r = 0; r < rows; ++r) {
            const S* gr = gy + r * d;
            const S* hr = xhat.data() + r * d;
            for (int64_t j = 0; j < d; ++j) {
              ggam[static_cast<size_t>(j)] += gr[j] * hr[j];
              gbet[static_cast<size_t>(j)] += gr[j];
            }
          }
          if (gamma.requires_grad()) detail::accumulate(gamma.node(), ggam);
          if (beta.requires_grad()) detail::accumulate(beta.node(), gbet);
        }
        if (x.requires_grad()) {
          std::vector<S> gx(x.values().size());
          for (int64_t r = 0; r < rows; ++r) {
            const S* gr = gy + r * d;
            const S* hr = xhat.data() + r * d;
            S inv = inv_std[static_cast<size_t>(r)];
            S mean_h = 0, mean_hh = 0;
            for (int64_t j = 0; j < d; ++j) {
              S h = gr[j] * pg2[j];
              mean_h += h;
              mean_hh += h * hr[j];
            }
            mean_h /= static_cast<S>(d);
            mean_hh /= static_cast<S>(d);
            S* out_r = gx.data() + r * d;
            for (int64_t j = 0; j < d; ++j) {
              S h = gr[j] * pg2[j];
              out_r[j] = inv * (h - mean_h - hr[j] * mean_hh);
            }
          }
          detail::accumulate(x.node(), gx);
        }
      });
  return y;
}

template <class S>
TensorT<S> relu(const TensorT<S>& a) {
  detail::check_defined(a, "relu");
  detail::check_finite(a, "relu");
  std::vector<S> out(a.values());
  for (auto& x : out) x = x > S(0) ? x : S(0);
  TensorT<S> y = detail::make_result(OpKind::relu, a.shape(), std::move(out));
  detail::record<S>(y, {a}, [a](detail::Node<S>& nd) {
    std::vector<S> g(nd.grad);
    const S* px = a.values().data();
    for (size_t i = 0; i < g.size(); ++i) {
      if (px[i] <= S(0)) g[i] = S(0);
    }
    detail::accumulate(a.node(), g);
  });
  return y;
}

// Inverted dropout: scales kept activations by 1/(1-p) in training,
// identity in eval.
template <class S>
TensorT<S> dropout(const TensorT<S>& a, double p, Rng& rng, bool training) {
  detail::check_defined(a, "dropout");
  if (p < 0.0 || p >= 1.0) throw ValueError("dropout: p must be in [0,1)");
  if (!training || p == 0.0) return a;
  detail::check_finite(a, "dropout");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<uint8_t> keep(a.values().size());
  for (auto& k : keep) k = u(rng) >= p ? 1 : 0;
  const S inv = static_cast<S>(1.0 / (1.0 - p));
  std::vector<S> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? out[i] * inv : S(0);
  TensorT<S> y = detail::make_result(OpKind::dropout, a.shape(), std::move(out));
  detail::record<S>(y, {a}, [a, keep = std::move(keep), inv](detail::Node<S>& nd) {
    std::vector<S> g(nd.grad);
    for (size_t i = 0; i < g.size(); ++i) g[i] = keep[i] ? g[i] * inv : S(0);
    detail::accumulate(a.node(), g);
  });
  return y;
}

template <class S>
TensorT<S> sum(const TensorT<S>& a) {
  detail::check_defined(a, "sum");
  detail::check_finite(a, "sum");
  S acc = 0;
  for (S x : a.values()) acc += x;
  TensorT<S> y = detail::make_result(OpKind::sum, {1}, std::vector<S>{acc});
  detail::record<S>(y, {a}, [a](detail::Node<S>& nd) {
    std::vector<S> g(a.values().size(), nd.grad[0]);
    detail::accumulate(a.node(), g);
  });
  return y;
}

template <class S>
TensorT<S> mean(const TensorT<S>& a) {
  detail::check_defined(a, "mean");
  detail::check_finite(a, "mean");
  S acc = 0;
  for (S x : a.values()) acc += x;
  const S n = static_cast<S>(a.numel());
  TensorT<S> y = detail::make_result(OpKind::mean, {1}, std::vector<S>{acc / n});
  detail::record<S>(y, {a}, [a, n](detail::Node<S>& nd) {
    std::vector<S> g(a.values().size(), nd.grad[0] / n);
    detail::accumulate(a.node(), g);
  });
  return y;
}

// Replaces positions where mask==1 with `value`; gradient is blocked there.
template <class S>
TensorT<S> masked_fill(const TensorT<S>& a, const ByteMask& mask, S value) {
  detail::check_defined(a, "masked-fill");
  if (mask.shape != a.shape()) {
    throw ShapeError(std::string("masked-fill: mask shape ") + shape_str(mask.shape) +
                     " does not match " + shape_str(a.shape()));
  }
  detail::check_finite(a, "masked-fill");
  std::vector<S> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) {
    if (mask.v[i]) out[i] = value;
  }
  TensorT<S> y = detail::make_result(OpKind::masked_fill, a.shape(), std::move(out));
  std::vector<uint8_t> mv = mask.v;
  detail::record<S>(y, {a}, [a, mv = std::move(mv)](detail::Node<S>& nd) {
    std::vector<S> g(nd.grad);
    for (size_t i = 0; i < g.size(); ++i) {
      if (mv[i]) g[i] = S(0);
    }
    detail::accumulate(a.node(), g);
  });
  return y;
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  detail::check_defined(a, "sigmoid");
  detail::check_finite(a, "sigmoid");
  std::vector<S> out(a.values().size());
  const S* px = a.values().data();
  for (size_t i = 0; i < out.size(); ++i) {
    S x = px[i];
    if (x >= S(0)) {
      out[i] = S(1) / (S(1) + std::exp(-x));
    } else {
      S e = std::exp(x);
      out[i] = e / (S(1) + e);
    }
  }
  TensorT<S> y = detail::make_result(OpKind::sigmoid, a.shape(), std::move(out));
  detail::record<S>(y, {a}, [a](detail::Node<S>& nd) {
    std::vector<S> g(nd.grad);
    const S* py = nd.value.data();
    for (size_t i = 0; i < g.size(); ++i) g[i] *= py[i] * (S(1) - py[i]);
    detail::accumulate(a.node(), g);
  });
  return y;
}

template <class S>
TensorT<S> exp(const TensorT<S>& a) {
  detail::check_defined(a, "exp");
  detail::check_finite(a, "exp");
  std::vector<S> out(a.values().size());
  const S* px = a.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(px[i]);
  TensorT<S> y = detail::make_result(OpKind::exp, a.shape(), std::move(out));
  detail::record<S>(y, {a}, [a](detail::Node<S>& nd) {
    std::vector<S> g(nd.grad);
    const S* py = nd.value.data();
    for (size_t i = 0; i < g.size(); ++i) g[i] *= py[i];
    detail::accumulate(a.node(), g);
  });
  return y;
}

template <class S>
TensorT<S> log(const TensorT<S>& a) {
  detail::check_defined(a, "log");
  detail::check_finite(a, "log");
  for (S x : a.values()) {
    if (x <= S(0)) throw ValueError("log: non-positive input value");
  }
  std::vector<S> out(a.values().size());
  const S* px = a.values().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(px[i]);
  TensorT<S> y = detail::make_result(OpKind::log, a.shape(), std::move(out));
  detail::record<S>(y, {a}, [a](detail::Node<S>& nd) {
    std::vector<S> g(nd.grad);
    const S* px2 = a.values().data();
    for (size_t i = 0; i < g.size(); ++i) g[i] /= px2[i];
    detail::accumulate(a.node(), g);
  });
  return y;
}

// ---------------------------------------------------------------------------
// Generic dispatcher, mainly for iterating the op set in checks.
// ---------------------------------------------------------------------------

template <class S>
struct OpAttrs {
  S scalar{1};             // scale factor / masked_fill value
  Shape shape;             // reshape target
  int64_t axis = 0;        // concat axis
  int64_t axis0 = -2;      // transpose axes
  int64_t axis1 = -1;
  double p = 0.5;          // dropout probability
  uint64_t seed = 0;       // dropout rng seed
  bool training = true;    // dropout mode
  S eps = S(1e-5);         // layer-norm epsilon
  const IdMatrix* ids = nullptr;
  const ByteMask* mask = nullptr;
};

template <class S>
TensorT<S> apply(OpKind op, const std::vector<TensorT<S>>& in, const OpAttrs<S>& attrs = {}) {
  auto need = [&](size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(op_name(op)) + ": expects " + std::to_string(n) +
                       " tensor inputs, got " + std::to_string(in.size()));
    }
  };
  switch (op) {
    case OpKind::matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::scale: need(1); return scale(in[0], attrs.scalar);
    case OpKind::transpose: need(1); return transpose(in[0], attrs.axis0, attrs.axis1);
    case OpKind::reshape: need(1); return reshape(in[0], attrs.shape);
    case OpKind::concat: need(2); return concat(in[0], in[1], attrs.axis);
    case OpKind::embedding_gather:
      need(1);
      if (!attrs.ids) throw ValueError("embedding-gather: ids missing");
      return embedding(in[0], *attrs.ids);
    case OpKind::softmax: need(1); return softmax(in[0]);
    case OpKind::log_softmax: need(1); return log_softmax(in[0]);
    case OpKind::layer_norm: need(3); return layer_norm(in[0], in[1], in[2], attrs.eps);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::dropout: {
      need(1);
      Rng rng(attrs.seed);
      return dropout(in[0], attrs.p, rng, attrs.training);
    }
    case OpKind::sum: need(1); return sum(in[0]);
    case OpKind::mean: need(1); return mean(in[0]);
    case OpKind::masked_fill:
      need(1);
      if (!attrs.mask) throw ValueError("masked-fill: mask missing");
      return masked_fill(in[0], *attrs.mask, attrs.scalar);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::exp: need(1); return exp(in[0]);
    case OpKind::log: need(1); return log(in[0]);
    case OpKind::leaf: break;
  }
  throw ValueError("apply: not an executable op kind");
}

}  // namespace distillab
