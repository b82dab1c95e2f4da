// Copyright 2026 The atssnet Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Minimal dense tensor with reverse-mode automatic differentiation. Covers
// exactly the layers the separator and the speaker embedder need: linear,
// dilated/strided conv2d, relu/sigmoid/softmax, layer norm, statistics
// pooling, concat/slice/permute plumbing, plus Adam and a finite-difference
// gradient checker. Scalar type is templated; float is the training type,
// double exists for high-precision gradient verification.
//
// Storage is row-major. Reductions (sums, means, normalization statistics,
// softmax denominators, bias gradients) accumulate in double regardless of
// the storage type; dense contractions accumulate in the storage type.

#ifndef ATSS_TENSOR_HPP_
#define ATSS_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "atss/common.hpp"
#include "atss/gemm.hpp"

namespace atss {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

namespace detail {

inline thread_local bool g_grad_enabled = true;

// Verification hook: when set, relu() folds its activation sign pattern
// into the signature. Finite-difference checks exclude coordinates whose
// perturbation flips a relu, since the kink corrupts the numeric
// derivative there.
struct ReluProbe {
  uint64_t signature = 1469598103934665603ull;
};
inline thread_local ReluProbe* g_relu_probe = nullptr;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // leaf accumulation buffer, filled by backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  // Adds d(loss)/d(this) contributions into the parents' adjoint buffers.
  // parent_adj[i] is null when parent i does not need a gradient.
  std::function<void(Node<T>* self, const T* adj,
                     const std::vector<T*>& parent_adj)>
      backward;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
};

inline std::vector<int64_t> row_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

}  // namespace detail

// Disables graph recording in the current thread (inference paths).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::g_grad_enabled) {
    detail::g_grad_enabled = false;
  }
  ~NoGradGuard() { detail::g_grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->value.assign(shape_numel(shape), v);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from_data(Shape shape, std::vector<T> data,
                          bool requires_grad = false) {
    ATSS_CHECK(shape_numel(shape) == static_cast<int64_t>(data.size()),
               "tensor data length does not match shape " + shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev,
                      bool requires_grad = false) {
    std::vector<T> data(shape_numel(shape));
    for (auto& x : data) x = static_cast<T>(rng.normal() * stddev);
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[i]; }
  int64_t numel() const { return node_->numel(); }
  const std::vector<T>& data() const { return node_->value; }
  std::vector<T>& mutable_data() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  const std::vector<T>& grad() const {
    ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    ATSS_CHECK(numel() == 1, "item() on non-scalar tensor");
    return node_->value[0];
  }

  T at(std::initializer_list<int64_t> idx) const {
    const Shape& s = node_->shape;
    ATSS_CHECK(idx.size() == s.size(), "at(): wrong index arity");
    int64_t flat = 0;
    size_t i = 0;
    for (int64_t v : idx) {
      flat = flat * s[i] + v;
      ++i;
    }
    return node_->value[flat];
  }

  void backward() const;  // defined after GradTape

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  void ensure_grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

// Builds an op node. Parents are linked only when gradients are both enabled
// and requested, so inference graphs do not retain intermediates.
template <class T>
Tensor<T> make_op(
    Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
    std::function<void(Node<T>*, const T*, const std::vector<T*>&)> bw) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs && g_grad_enabled) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(bw);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  ATSS_CHECK(a.shape() == b.shape(), "add: shape mismatch " +
                                         shape_str(a.shape()) + " vs " +
                                         shape_str(b.shape()));
  std::vector<T> out(a.numel());
  const auto &av = a.data(), &bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_op<T>(
      a.shape(), std::move(out), {a, b},
      [](detail::Node<T>* self, const T* adj, const std::vector<T*>& pa) {
        const int64_t n = self->numel();
        for (int p = 0; p < 2; ++p)
          if (pa[p])
            for (int64_t i = 0; i < n; ++i) pa[p][i] += adj[i];
      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  ATSS_CHECK(a.shape() == b.shape(), "sub: shape mismatch " +
                                         shape_str(a.shape()) + " vs " +
                                         shape_str(b.shape()));
  std::vector<T> out(a.numel());
  const auto &av = a.data(), &bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_op<T>(
      a.shape(), std::move(out), {a, b},
      [](detail::Node<T>* self, const T* adj, const std::vector<T*>& pa) {
        const int64_t n = self->numel();
        if (pa[0])
          for (int64_t i = 0; i < n; ++i) pa[0][i] += adj[i];
        if (pa[1])
          for (int64_t i = 0; i < n; ++i) pa[1][i] -= adj[i];
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  ATSS_CHECK(a.shape() == b.shape(), "mul: shape mismatch " +
                                         shape_str(a.shape()) + " vs " +
                                         shape_str(b.shape()));
  std::vector<T> out(a.numel());
  const auto &av = a.data(), &bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op<T>(
      a.shape(), std::move(out), {a, b},
      [](detail::Node<T>* self, const T* adj, const std::vector<T*>& pa) {
        const int64_t n = self->numel();
        const T* av = self->parents[0]->value.data();
        const T* bv = self->parents[1]->value.data();
        if (pa[0])
          for (int64_t i = 0; i < n; ++i) pa[0][i] += adj[i] * bv[i];
        if (pa[1])
          for (int64_t i = 0; i < n; ++i) pa[1][i] += adj[i] * av[i];
      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return detail::make_op<T>(
      a.shape(), std::move(out), {a},
      [c](detail::Node<T>* self, const T* adj, const std::vector<T*>& pa) {
        const int64_t n = self->numel();
        if (pa[0])
          for (int64_t i = 0; i < n; ++i) pa[0][i] += adj[i] * c;
      });
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  if (detail::g_relu_probe) {
    uint64_t& sig = detail::g_relu_probe->signature;
    for (size_t i = 0; i < av.size(); ++i)
      sig = (sig * 1099511628211ull) ^ (av[i] > T(0) ? i + 1 : 0);
  }
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  return detail::make_op<T>(
      a.shape(), std::move(out), {a},
      [](detail::Node<T>* self, const T* adj, const std::vector<T*>& pa) {
        if (!pa[0]) return;
        const int64_t n = self->numel();
        const T* xv = self->parents[0]->value.data();
        // subgradient at 0 is 0
        for (int64_t i = 0; i < n; ++i)
          if (xv[i] > T(0)) pa[0][i] += adj[i];
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (size_t i = 0; i < out.size(); ++i) {
    const double x = static_cast<double>(av[i]);
    const double y =
        x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    out[i] = static_cast<T>(y);
  }
  return detail::make_op<T>(
      a.shape(), std::move(out), {a},
      [](detail::Node<T>* self, const T* adj, const std::vector<T*>& pa) {
        if (!pa[0]) return;
        const int64_t n = self->numel();
        const T* yv = self->value.data();
        for (int64_t i = 0; i < n; ++i)
          pa[0][i] += adj[i] * yv[i] * (T(1) - yv[i]);
      });
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  ATSS_CHECK(shape_numel(shape) == a.numel(),
             "reshape: element count mismatch " + shape_str(a.shape()) +
                 " -> " + shape_str(shape));
  std::vector<T> out = a.data();
  return detail::make_op<T>(
      std::move(shape), std::move(out), {a},
      [](detail::Node<T>* self, const T* adj, const std::vector<T*>& pa) {
        if (!pa[0]) return;
        const int64_t n = self->numel();
        for (int64_t i = 0; i < n; ++i) pa[0][i] += adj[i];
      });
}

namespace detail {

// out[perm(idx)] = in[idx]; used forward and (inverted) backward.
template <class T>
void permute_copy(const Shape& in_shape, const std::vector<int>& perm,
                  const T* in, T* out, bool accumulate) {
  const int nd = static_cast<int>(in_shape.size());
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = in_shape[perm[i]];
  const auto in_st = row_strides(in_shape);
  const auto out_st = row_strides(out_shape);
  // stride of output walk expressed in input axis order
  std::vector<int64_t> walk(nd);
  for (int i = 0; i < nd; ++i) walk[perm[i]] = out_st[i];
  const int64_t n = shape_numel(in_shape);
  std::vector<int64_t> idx(nd, 0);
  int64_t opos = 0;
  for (int64_t ipos = 0; ipos < n; ++ipos) {
    if (accumulate) out[opos] += in[ipos];
    else out[opos] = in[ipos];
    for (int ax = nd - 1; ax >= 0; --ax) {
      idx[ax]++;
      opos += walk[ax];
      if (idx[ax] < in_shape[ax]) break;
      opos -= walk[ax] * in_shape[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> permute(const Tensor<T>& a, std::vector<int> perm) {
  ATSS_CHECK(static_cast<int>(perm.size()) == a.ndim(),
             "permute: axis count mismatch");
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
  std::vector<T> out(a.numel());
  detail::permute_copy(a.shape(), perm, a.data().data(), out.data(), false);
  return detail::make_op<T>(
      std::move(out_shape), std::move(out), {a},
      [perm](detail::Node<T>* self, const T* adj,
             const std::vector<T*>& pa) {
        if (!pa[0]) return;
        // adjoint of input = inverse-permuted adjoint of output
        const int nd = static_cast<int>(perm.size());
        std::vector<int> inv(nd);
        for (int i = 0; i < nd; ++i) inv[perm[i]] = i;
        detail::permute_copy(self->shape, inv, adj, pa[0], true);
      });
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  ATSS_CHECK(a.ndim() == 2, "transpose2d: need a matrix");
  return permute(a, {1, 0});
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  ATSS_CHECK(!parts.empty(), "concat: no inputs");
  const int nd = parts[0].ndim();
  ATSS_CHECK(axis >= 0 && axis < nd, "concat: bad axis");
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    ATSS_CHECK(p.ndim() == nd, "concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis)
        ATSS_CHECK(p.dim(i) == out_shape[i], "concat: shape mismatch");
    axis_total += p.dim(axis);
  }
  out_shape[axis] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];

  std::vector<T> out(shape_numel(out_shape));
  std::vector<int64_t> spans;  // axis extent per part
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t span = p.dim(axis);
    spans.push_back(span);
    const T* src = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(src + o * span * inner, src + (o + 1) * span * inner,
                out.data() + (o * axis_total + offset) * inner);
    offset += span;
  }

  return detail::make_op<T>(
      std::move(out_shape), std::move(out), parts,
      [axis, spans, outer, inner, axis_total](
          detail::Node<T>*, const T* adj, const std::vector<T*>& pa) {
        int64_t offset = 0;
        for (size_t p = 0; p < spans.size(); ++p) {
          const int64_t span = spans[p];
          if (pa[p]) {
            for (int64_t o = 0; o < outer; ++o) {
              const T* src = adj + (o * axis_total + offset) * inner;
              T* dst = pa[p] + o * span * inner;
              for (int64_t i = 0; i < span * inner; ++i) dst[i] += src[i];
            }
          }
          offset += span;
        }
      });
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
  const int nd = a.ndim();
  ATSS_CHECK(axis >= 0 && axis < nd, "slice: bad axis");
  ATSS_CHECK(start >= 0 && len >= 1 && start + len <= a.dim(axis),
             "slice: range out of bounds");
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
  const int64_t span = a.dim(axis);

  std::vector<T> out(shape_numel(out_shape));
  const T* src = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(src + (o * span + start) * inner,
              src + (o * span + start + len) * inner,
              out.data() + o * len * inner);

  return detail::make_op<T>(
      std::move(out_shape), std::move(out), {a},
      [axis, start, len, outer, inner, span](
          detail::Node<T>*, const T* adj, const std::vector<T*>& pa) {
        if (!pa[0]) return;
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = adj + o * len * inner;
          T* dst = pa[0] + (o * span + start) * inner;
          for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      });
}

// Repeats a length-n vector as rows of a [rows, n] matrix.
template <class T>
Tensor<T> tile_rows(const Tensor<T>& v, int64_t rows) {
  ATSS_CHECK(v.ndim() == 1, "tile_rows: need a vector");
  const int64_t n = v.numel();
  std::vector<T> out(rows * n);
  for (int64_t r = 0; r < rows; ++r)
    std::copy(v.data().begin(), v.data().end(), out.begin() + r * n);
  return detail::make_op<T>(
      Shape{rows, n}, std::move(out), {v},
      [rows, n](detail::Node<T>*, const T* adj, const std::vector<T*>& pa) {
        if (!pa[0]) return;
        for (int64_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (int64_t r = 0; r < rows; ++r) acc += adj[r * n + j];
          pa[0][j] += static_cast<T>(acc);
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  return detail::make_op<T>(
      Shape{1}, {static_cast<T>(acc)}, {a},
      [](detail::Node<T>* self, const T* adj, const std::vector<T*>& pa) {
        if (!pa[0]) return;
        const int64_t n = self->parents[0]->numel();
        for (int64_t i = 0; i < n; ++i) pa[0][i] += adj[0];
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  ATSS_CHECK(a.ndim() == 2 && b.ndim() == 2, "matmul: need matrices");
  ATSS_CHECK(a.dim(1) == b.dim(0), "matmul: inner dims mismatch " +
                                       shape_str(a.shape()) + " x " +
                                       shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::gemm<T>(false, false, m, n, k, T(1), a.data().data(),
                  b.data().data(), T(0), out.data());
  return detail::make_op<T>(
      Shape{m, n}, std::move(out), {a, b},
      [m, k, n](detail::Node<T>* self, const T* adj,
                const std::vector<T*>& pa) {
        const T* av = self->parents[0]->value.data();
        const T* bv = self->parents[1]->value.data();
        if (pa[0])  // dA += dY * B^T
          detail::gemm<T>(false, true, m, k, n, T(1), adj, bv, T(1), pa[0]);
        if (pa[1])  // dB += A^T * dY
          detail::gemm<T>(true, false, k, n, m, T(1), av, adj, T(1), pa[1]);
      });
}

// y = x * W + b applied over the last axis: x [..., f_in] -> [..., f_out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  ATSS_CHECK(w.ndim() == 2, "linear: W must be [f_in, f_out]");
  ATSS_CHECK(x.ndim() >= 1, "linear: x must have at least one axis");
  const int64_t f_in = w.dim(0), f_out = w.dim(1);
  ATSS_CHECK(x.dim(x.ndim() - 1) == f_in,
             "linear: inner dim mismatch " + shape_str(x.shape()) + " vs W " +
                 shape_str(w.shape()));
  ATSS_CHECK(b.ndim() == 1 && b.dim(0) == f_out,
             "linear: bias length mismatch");
  const int64_t rows = x.numel() / f_in;
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 1] = f_out;

  std::vector<T> out(rows * f_out);
  detail::gemm<T>(false, false, rows, f_out, f_in, T(1), x.data().data(),
                  w.data().data(), T(0), out.data());
  const T* bias = b.data().data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < f_out; ++j) out[r * f_out + j] += bias[j];

  return detail::make_op<T>(
      std::move(out_shape), std::move(out), {x, w, b},
      [rows, f_in, f_out](detail::Node<T>* self, const T* adj,
                          const std::vector<T*>& pa) {
        const T* xv = self->parents[0]->value.data();
        const T* wv = self->parents[1]->value.data();
        if (pa[0])  // dX += dY * W^T
          detail::gemm<T>(false, true, rows, f_in, f_out, T(1), adj, wv, T(1),
                          pa[0]);
        if (pa[1])  // dW += X^T * dY
          detail::gemm<T>(true, false, f_in, f_out, rows, T(1), xv, adj, T(1),
                          pa[1]);
        if (pa[2]) {
          for (int64_t j = 0; j < f_out; ++j) {
            double acc = 0.0;
            for (int64_t r = 0; r < rows; ++r) acc += adj[r * f_out + j];
            pa[2][j] += static_cast<T>(acc);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Softmax / layer norm / pooling

// Softmax along `axis`, max-shifted, denominator accumulated in double.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int nd = x.ndim();
  if (axis < 0) axis += nd;
  ATSS_CHECK(axis >= 0 && axis < nd, "softmax: bad axis");
  int64_t outer = 1, inner = 1;
  const int64_t span = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);

  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * span * inner + i;
      T mx = xv[base];
      for (int64_t s = 1; s < span; ++s)
        mx = std::max(mx, xv[base + s * inner]);
      double denom = 0.0;
      for (int64_t s = 0; s < span; ++s) {
        const double e = std::exp(static_cast<double>(xv[base + s * inner]) -
                                  static_cast<double>(mx));
        out[base + s * inner] = static_cast<T>(e);
        denom += e;
      }
      const double norm = 1.0 / denom;
      for (int64_t s = 0; s < span; ++s)
        out[base + s * inner] = static_cast<T>(out[base + s * inner] * norm);
    }
  }

  return detail::make_op<T>(
      x.shape(), std::move(out), {x},
      [outer, inner, span](detail::Node<T>* self, const T* adj,
                           const std::vector<T*>& pa) {
        if (!pa[0]) return;
        const T* yv = self->value.data();
        // dx = y * (dy - sum(dy * y))
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * span * inner + i;
            double dot = 0.0;
            for (int64_t s = 0; s < span; ++s) {
              const int64_t p = base + s * inner;
              dot += static_cast<double>(adj[p]) * yv[p];
            }
            for (int64_t s = 0; s < span; ++s) {
              const int64_t p = base + s * inner;
              pa[0][p] += static_cast<T>(yv[p] * (adj[p] - dot));
            }
          }
        }
      });
}

// Layer norm over the last axis; gamma/beta have that axis' length.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps = 1e-5) {
  const int nd = x.ndim();
  ATSS_CHECK(nd >= 1, "layer_norm: scalar input");
  const int64_t n = x.dim(nd - 1);
  ATSS_CHECK(gamma.ndim() == 1 && gamma.dim(0) == n &&
                 beta.ndim() == 1 && beta.dim(0) == n,
             "layer_norm: gamma/beta must match last axis (" +
                 std::to_string(n) + ")");
  const int64_t rows = x.numel() / n;
  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv + r * n;
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += row[j];
    mean /= n;
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    T* orow = out.data() + r * n;
    for (int64_t j = 0; j < n; ++j)
      orow[j] = static_cast<T>((row[j] - mean) * inv * gv[j] + bv[j]);
  }

  return detail::make_op<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, n, eps](detail::Node<T>* self, const T* adj,
                     const std::vector<T*>& pa) {
        const T* xv = self->parents[0]->value.data();
        const T* gv = self->parents[1]->value.data();
        std::vector<double> dgamma(pa[1] ? n : 0, 0.0);
        std::vector<double> dbeta(pa[2] ? n : 0, 0.0);
        std::vector<double> xhat(n);
        for (int64_t r = 0; r < rows; ++r) {
          const T* row = xv + r * n;
          const T* arow = adj + r * n;
          double mean = 0.0;
          for (int64_t j = 0; j < n; ++j) mean += row[j];
          mean /= n;
          double var = 0.0;
          for (int64_t j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
          }
          var /= n;
          const double inv = 1.0 / std::sqrt(var + eps);
          for (int64_t j = 0; j < n; ++j) xhat[j] = (row[j] - mean) * inv;
          if (pa[1])
            for (int64_t j = 0; j < n; ++j) dgamma[j] += arow[j] * xhat[j];
          if (pa[2])
            for (int64_t j = 0; j < n; ++j) dbeta[j] += arow[j];
          if (pa[0]) {
            double mean_gdy = 0.0, mean_gdy_xhat = 0.0;
            for (int64_t j = 0; j < n; ++j) {
              const double gdy = static_cast<double>(gv[j]) * arow[j];
              mean_gdy += gdy;
              mean_gdy_xhat += gdy * xhat[j];
            }
            mean_gdy /= n;
            mean_gdy_xhat /= n;
            T* prow = pa[0] + r * n;
            for (int64_t j = 0; j < n; ++j) {
              const double gdy = static_cast<double>(gv[j]) * arow[j];
              prow[j] += static_cast<T>(
                  inv * (gdy - mean_gdy - xhat[j] * mean_gdy_xhat));
            }
          }
        }
        if (pa[1])
          for (int64_t j = 0; j < n; ++j) pa[1][j] += static_cast<T>(dgamma[j]);
        if (pa[2])
          for (int64_t j = 0; j < n; ++j) pa[2][j] += static_cast<T>(dbeta[j]);
      });
}

// Per-channel mean and population std over H x W, concatenated: [C,H,W] -> [2C].
template <class T>
Tensor<T> stat_pool(const Tensor<T>& x) {
  ATSS_CHECK(x.ndim() == 3, "stat_pool: need [C,H,W]");
  const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  ATSS_CHECK(hw >= 1, "stat_pool: empty spatial extent");
  constexpr double kVarEps = 1e-8;
  std::vector<T> out(2 * c);
  const T* xv = x.data().data();
  for (int64_t ch = 0; ch < c; ++ch) {
    const T* plane = xv + ch * hw;
    double mean = 0.0;
    for (int64_t i = 0; i < hw; ++i) mean += plane[i];
    mean /= hw;
    double var = 0.0;
    for (int64_t i = 0; i < hw; ++i) {
      const double d = plane[i] - mean;
      var += d * d;
    }
    var /= hw;
    out[ch] = static_cast<T>(mean);
    out[c + ch] = static_cast<T>(std::sqrt(var + kVarEps));
  }
  return detail::make_op<T>(
      Shape{2 * c}, std::move(out), {x},
      [c, hw](detail::Node<T>* self, const T* adj,
              const std::vector<T*>& pa) {
        if (!pa[0]) return;
        const T* xv = self->parents[0]->value.data();
        const T* yv = self->value.data();
        for (int64_t ch = 0; ch < c; ++ch) {
          const T* plane = xv + ch * hw;
          T* dplane = pa[0] + ch * hw;
          const double mean = yv[ch];
          const double stdev = yv[c + ch];
          const double dmean = adj[ch];
          const double dstd = adj[c + ch];
          const double k_mean = dmean / hw;
          const double k_std = dstd / (hw * stdev);
          for (int64_t i = 0; i < hw; ++i)
            dplane[i] +=
                static_cast<T>(k_mean + k_std * (plane[i] - mean));
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

struct ConvDims {
  int64_t c_in, h, w;
  int64_t c_out, kh, kw;
  int64_t dh, dw, sh, sw;
  int64_t ph, pw;
  int64_t ho, wo;
};

inline ConvDims conv_dims(const Shape& x, const Shape& k, int64_t dh,
                          int64_t dw, int64_t sh, int64_t sw) {
  ATSS_CHECK(x.size() == 3, "conv2d: input must be [C,H,W]");
  ATSS_CHECK(k.size() == 4, "conv2d: kernel must be [C_out,C_in,kh,kw]");
  ATSS_CHECK(k[1] == x[0], "conv2d: channel mismatch, input " + shape_str(x) +
                               " kernel " + shape_str(k));
  ATSS_CHECK(k[2] % 2 == 1 && k[3] % 2 == 1,
             "conv2d: even kernel extents are unsupported");
  ATSS_CHECK(dh >= 1 && dw >= 1 && sh >= 1 && sw >= 1,
             "conv2d: dilation/stride must be positive");
  ConvDims d;
  d.c_in = x[0];
  d.h = x[1];
  d.w = x[2];
  d.c_out = k[0];
  d.kh = k[2];
  d.kw = k[3];
  d.dh = dh;
  d.dw = dw;
  d.sh = sh;
  d.sw = sw;
  d.ph = dh * (d.kh - 1) / 2;
  d.pw = dw * (d.kw - 1) / 2;
  d.ho = (d.h + 2 * d.ph - dh * (d.kh - 1) - 1) / sh + 1;
  d.wo = (d.w + 2 * d.pw - dw * (d.kw - 1) - 1) / sw + 1;
  return d;
}

// Fills a [C_in*kh*kw, n_rows*Wo] patch matrix for output rows
// [row0, row0+n_rows).
template <class T>
void im2col(const ConvDims& d, const T* x, int64_t row0, int64_t n_rows,
            T* col) {
  const int64_t cols = n_rows * d.wo;
  int64_t r = 0;
  for (int64_t ci = 0; ci < d.c_in; ++ci) {
    const T* plane = x + ci * d.h * d.w;
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj, ++r) {
        T* dst = col + r * cols;
        for (int64_t oh = row0; oh < row0 + n_rows; ++oh) {
          const int64_t ih = oh * d.sh - d.ph + ki * d.dh;
          if (ih < 0 || ih >= d.h) {
            std::fill(dst, dst + d.wo, T(0));
            dst += d.wo;
            continue;
          }
          const T* src = plane + ih * d.w;
          for (int64_t ow = 0; ow < d.wo; ++ow) {
            const int64_t iw = ow * d.sw - d.pw + kj * d.dw;
            *dst++ = (iw >= 0 && iw < d.w) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-adds a patch-matrix gradient back onto the input gradient.
template <class T>
void col2im_add(const ConvDims& d, const T* col, int64_t row0, int64_t n_rows,
                T* dx) {
  const int64_t cols = n_rows * d.wo;
  int64_t r = 0;
  for (int64_t ci = 0; ci < d.c_in; ++ci) {
    T* plane = dx + ci * d.h * d.w;
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj, ++r) {
        const T* src = col + r * cols;
        for (int64_t oh = row0; oh < row0 + n_rows; ++oh) {
          const int64_t ih = oh * d.sh - d.ph + ki * d.dh;
          if (ih < 0 || ih >= d.h) {
            src += d.wo;
            continue;
          }
          T* dst = plane + ih * d.w;
          for (int64_t ow = 0; ow < d.wo; ++ow, ++src) {
            const int64_t iw = ow * d.sw - d.pw + kj * d.dw;
            if (iw >= 0 && iw < d.w) dst[iw] += *src;
          }
        }
      }
    }
  }
}

// Strip height keeping the im2col buffer under ~32 MB of T.
inline int64_t conv_strip_rows(const ConvDims& d) {
  const int64_t budget = (int64_t{32} << 20) / static_cast<int64_t>(sizeof(float));
  const int64_t per_row = d.c_in * d.kh * d.kw * d.wo;
  return std::max<int64_t>(1, std::min(d.ho, budget / std::max<int64_t>(per_row, 1)));
}

// With few output channels the im2col GEMM degenerates into a thin,
// memory-bound panel; plain loops beat it there. Stride-1 only.
inline bool conv_use_direct(const ConvDims& d) {
  return d.sh == 1 && d.sw == 1 && d.c_out <= 16;
}

template <class T>
void conv_direct_forward(const ConvDims& d, const T* x, const T* kernel,
                         T* out) {
  std::vector<T> acc(d.wo);
  for (int64_t co = 0; co < d.c_out; ++co) {
    for (int64_t oh = 0; oh < d.ho; ++oh) {
      std::fill(acc.begin(), acc.end(), T(0));
      for (int64_t ci = 0; ci < d.c_in; ++ci) {
        const T* plane = x + ci * d.h * d.w;
        const T* kbase = kernel + (co * d.c_in + ci) * d.kh * d.kw;
        for (int64_t ki = 0; ki < d.kh; ++ki) {
          const int64_t ih = oh - d.ph + ki * d.dh;
          if (ih < 0 || ih >= d.h) continue;
          const T* src = plane + ih * d.w;
          for (int64_t kj = 0; kj < d.kw; ++kj) {
            const T w = kbase[ki * d.kw + kj];
            const int64_t shift = kj * d.dw - d.pw;
            const int64_t lo = std::max<int64_t>(0, -shift);
            const int64_t hi = std::min<int64_t>(d.wo, d.w - shift);
            const T* s = src + shift;
            for (int64_t ow = lo; ow < hi; ++ow) acc[ow] += w * s[ow];
          }
        }
      }
      std::copy(acc.begin(), acc.end(), out + (co * d.ho + oh) * d.wo);
    }
  }
}

template <class T>
void conv_direct_dkernel(const ConvDims& d, const T* x, const T* adj,
                         T* dk) {
  for (int64_t co = 0; co < d.c_out; ++co) {
    const T* dy = adj + co * d.ho * d.wo;
    for (int64_t ci = 0; ci < d.c_in; ++ci) {
      const T* plane = x + ci * d.h * d.w;
      T* kbase = dk + (co * d.c_in + ci) * d.kh * d.kw;
      for (int64_t ki = 0; ki < d.kh; ++ki) {
        for (int64_t kj = 0; kj < d.kw; ++kj) {
          const int64_t shift = kj * d.dw - d.pw;
          const int64_t lo = std::max<int64_t>(0, -shift);
          const int64_t hi = std::min<int64_t>(d.wo, d.w - shift);
          // rows reduce in T, the cross-row accumulator in double
          double acc = 0.0;
          for (int64_t oh = 0; oh < d.ho; ++oh) {
            const int64_t ih = oh - d.ph + ki * d.dh;
            if (ih < 0 || ih >= d.h) continue;
            acc += dotprod(dy + oh * d.wo + lo, plane + ih * d.w + shift + lo,
                           hi - lo);
          }
          kbase[ki * d.kw + kj] += static_cast<T>(acc);
        }
      }
    }
  }
}

template <class T>
void conv_direct_dx(const ConvDims& d, const T* kernel, const T* adj, T* dx) {
  for (int64_t ci = 0; ci < d.c_in; ++ci) {
    T* plane = dx + ci * d.h * d.w;
    for (int64_t a = 0; a < d.h; ++a) {
      T* drow = plane + a * d.w;
      for (int64_t co = 0; co < d.c_out; ++co) {
        const T* dy = adj + co * d.ho * d.wo;
        const T* kbase = kernel + (co * d.c_in + ci) * d.kh * d.kw;
        for (int64_t ki = 0; ki < d.kh; ++ki) {
          const int64_t oh = a + d.ph - ki * d.dh;
          if (oh < 0 || oh >= d.ho) continue;
          const T* arow = dy + oh * d.wo;
          for (int64_t kj = 0; kj < d.kw; ++kj) {
            const T w = kbase[ki * d.kw + kj];
            const int64_t shift = d.pw - kj * d.dw;  // ow = b + shift
            const int64_t lo = std::max<int64_t>(0, -shift);
            const int64_t hi = std::min<int64_t>(d.w, d.wo - shift);
            const T* s = arow + shift;
            for (int64_t b = lo; b < hi; ++b) drow[b] += w * s[b];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Zero-padded dilated cross-correlation with "same"-style padding
// (pad = dilation*(k-1)/2 per side); stride produces ceil(H/stride) rows.
// x: [C_in,H,W], kernel: [C_out,C_in,kh,kw] -> [C_out,Ho,Wo].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int64_t dh = 1,
                 int64_t dw = 1, int64_t sh = 1, int64_t sw = 1) {
  const detail::ConvDims d =
      detail::conv_dims(x.shape(), kernel.shape(), dh, dw, sh, sw);
  const int64_t kdim = d.c_in * d.kh * d.kw;
  std::vector<T> out(d.c_out * d.ho * d.wo);

  const bool pointwise =
      d.kh == 1 && d.kw == 1 && d.sh == 1 && d.sw == 1;
  const bool direct = !pointwise && detail::conv_use_direct(d);
  if (pointwise) {
    // 1x1 stride-1: the patch matrix is the input itself.
    detail::gemm<T>(false, false, d.c_out, d.h * d.w, d.c_in, T(1),
                    kernel.data().data(), x.data().data(), T(0), out.data());
  } else if (direct) {
    detail::conv_direct_forward(d, x.data().data(), kernel.data().data(),
                                out.data());
  } else {
    const int64_t strip = detail::conv_strip_rows(d);
    std::vector<T> col(kdim * strip * d.wo);
    for (int64_t row0 = 0; row0 < d.ho; row0 += strip) {
      const int64_t rows = std::min(strip, d.ho - row0);
      detail::im2col(d, x.data().data(), row0, rows, col.data());
      // out[:, row0:row0+rows, :] = kernel_mat * col
      std::vector<T> block(d.c_out * rows * d.wo);
      detail::gemm<T>(false, false, d.c_out, rows * d.wo, kdim, T(1),
                      kernel.data().data(), col.data(), T(0), block.data());
      for (int64_t co = 0; co < d.c_out; ++co)
        std::copy(block.begin() + co * rows * d.wo,
                  block.begin() + (co + 1) * rows * d.wo,
                  out.begin() + (co * d.ho + row0) * d.wo);
    }
  }

  return detail::make_op<T>(
      Shape{d.c_out, d.ho, d.wo}, std::move(out), {x, kernel},
      [d, kdim, pointwise, direct](detail::Node<T>* self, const T* adj,
                                   const std::vector<T*>& pa) {
        const T* xv = self->parents[0]->value.data();
        const T* kv = self->parents[1]->value.data();
        if (pointwise) {
          const int64_t hw = d.h * d.w;
          if (pa[0])  // dX += K^T * dY
            detail::gemm<T>(true, false, d.c_in, hw, d.c_out, T(1), kv, adj,
                            T(1), pa[0]);
          if (pa[1])  // dK += dY * X^T
            detail::gemm<T>(false, true, d.c_out, d.c_in, hw, T(1), adj, xv,
                            T(1), pa[1]);
          return;
        }
        if (direct) {
          if (pa[1]) detail::conv_direct_dkernel(d, xv, adj, pa[1]);
          if (pa[0]) detail::conv_direct_dx(d, kv, adj, pa[0]);
          return;
        }
        const int64_t strip = detail::conv_strip_rows(d);
        std::vector<T> col(kdim * strip * d.wo);
        std::vector<T> dy_block;
        std::vector<T> dcol;
        for (int64_t row0 = 0; row0 < d.ho; row0 += strip) {
          const int64_t rows = std::min(strip, d.ho - row0);
          const int64_t cols = rows * d.wo;
          dy_block.assign(d.c_out * cols, T(0));
          for (int64_t co = 0; co < d.c_out; ++co)
            std::copy(adj + (co * d.ho + row0) * d.wo,
                      adj + (co * d.ho + row0 + rows) * d.wo,
                      dy_block.begin() + co * cols);
          if (pa[1]) {
            detail::im2col(d, xv, row0, rows, col.data());
            // dK += dY_strip * col^T
            detail::gemm<T>(false, true, d.c_out, kdim, cols, T(1),
                            dy_block.data(), col.data(), T(1), pa[1]);
          }
          if (pa[0]) {
            dcol.assign(kdim * cols, T(0));
            // dcol = K^T * dY_strip
            detail::gemm<T>(true, false, kdim, cols, d.c_out, T(1), kv,
                            dy_block.data(), T(0), dcol.data());
            detail::col2im_add(d, dcol.data(), row0, rows, pa[0]);
          }
        }
      });
}

// Adds a per-channel bias to a [C,H,W] map.
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  ATSS_CHECK(x.ndim() == 3, "add_channel_bias: need [C,H,W]");
  ATSS_CHECK(b.ndim() == 1 && b.dim(0) == x.dim(0),
             "add_channel_bias: bias length mismatch");
  const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  const T* bv = b.data().data();
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < hw; ++i) out[ch * hw + i] = xv[ch * hw + i] + bv[ch];
  return detail::make_op<T>(
      x.shape(), std::move(out), {x, b},
      [c, hw](detail::Node<T>*, const T* adj, const std::vector<T*>& pa) {
        if (pa[0])
          for (int64_t i = 0; i < c * hw; ++i) pa[0][i] += adj[i];
        if (pa[1]) {
          for (int64_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (int64_t i = 0; i < hw; ++i) acc += adj[ch * hw + i];
            pa[1][ch] += static_cast<T>(acc);
          }
        }
      });
}

// y[c,h,w] = gamma[c] * x[c,h,w] + beta[c]; the batch-statistics-free
// normalization stand-in used inside the embedder's residual blocks.
template <class T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& gamma,
                         const Tensor<T>& beta) {
  ATSS_CHECK(x.ndim() == 3, "channel_affine: need [C,H,W]");
  const int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  ATSS_CHECK(gamma.ndim() == 1 && gamma.dim(0) == c && beta.ndim() == 1 &&
                 beta.dim(0) == c,
             "channel_affine: gamma/beta length mismatch");
  std::vector<T> out(x.numel());
  const T* xv = x.data().data();
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < hw; ++i)
      out[ch * hw + i] = gv[ch] * xv[ch * hw + i] + bv[ch];
  return detail::make_op<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [c, hw](detail::Node<T>* self, const T* adj,
              const std::vector<T*>& pa) {
        const T* xv = self->parents[0]->value.data();
        const T* gv = self->parents[1]->value.data();
        for (int64_t ch = 0; ch < c; ++ch) {
          const T* arow = adj + ch * hw;
          if (pa[0]) {
            T* prow = pa[0] + ch * hw;
            for (int64_t i = 0; i < hw; ++i) prow[i] += gv[ch] * arow[i];
          }
          if (pa[1]) {
            double acc = 0.0;
            const T* xrow = xv + ch * hw;
            for (int64_t i = 0; i < hw; ++i) acc += double(arow[i]) * xrow[i];
            pa[1][ch] += static_cast<T>(acc);
          }
          if (pa[2]) {
            double acc = 0.0;
            for (int64_t i = 0; i < hw; ++i) acc += arow[i];
            pa[2][ch] += static_cast<T>(acc);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Classification loss

// Cross entropy of a length-n logit vector against an integer label,
// computed via a max-shifted log-sum-exp.
template <class T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, int64_t label) {
  ATSS_CHECK(logits.ndim() == 1, "cross_entropy: need a logit vector");
  const int64_t n = logits.numel();
  ATSS_CHECK(label >= 0 && label < n, "cross_entropy: label out of range");
  const T* lv = logits.data().data();
  double mx = lv[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max<double>(mx, lv[i]);
  double denom = 0.0;
  for (int64_t i = 0; i < n; ++i) denom += std::exp(lv[i] - mx);
  const double loss = mx + std::log(denom) - lv[label];
  return detail::make_op<T>(
      Shape{1}, {static_cast<T>(loss)}, {logits},
      [n, label](detail::Node<T>* self, const T* adj,
                 const std::vector<T*>& pa) {
        if (!pa[0]) return;
        const T* lv = self->parents[0]->value.data();
        double mx = lv[0];
        for (int64_t i = 1; i < n; ++i) mx = std::max<double>(mx, lv[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < n; ++i) denom += std::exp(lv[i] - mx);
        for (int64_t i = 0; i < n; ++i) {
          const double p = std::exp(lv[i] - mx) / denom;
          pa[0][i] += static_cast<T>(adj[0] * (p - (i == label ? 1.0 : 0.0)));
        }
      });
}

// ---------------------------------------------------------------------------
// Reverse pass

// Topologically ordered record of the operations reachable from a root;
// backward() visits each node exactly once, root first.
template <class T>
class GradTape {
 public:
  using Node = detail::Node<T>;

  explicit GradTape(const Tensor<T>& root) : root_(root.node_ptr()) {
    // iterative post-order DFS: parents precede children in order_
    std::vector<std::pair<Node*, size_t>> stack;
    std::unordered_set<Node*> visited;
    if (root_->requires_grad) stack.emplace_back(root_.get(), 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next == 0) {
        if (visited.count(node)) {
          stack.pop_back();
          continue;
        }
        visited.insert(node);
      }
      bool descended = false;
      while (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (p->requires_grad && !visited.count(p)) {
          stack.emplace_back(p, 0);
          descended = true;
          break;
        }
      }
      if (!descended && next >= node->parents.size()) {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  // Reverse pass from a scalar root (seed adjoint 1). Interior adjoints are
  // freed as soon as they are consumed; leaf adjoints are kept for grad_of.
  void backward() {
    ATSS_CHECK(root_->numel() == 1, "backward: root must be scalar");
    ran_ = true;
    if (!root_->requires_grad) return;
    adj_[root_.get()] = {T(1)};
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node* node = *it;
      auto found = adj_.find(node);
      if (found == adj_.end()) continue;  // unreachable from root
      if (!node->backward) continue;      // leaf
      std::vector<T*> parent_adj(node->parents.size(), nullptr);
      for (size_t i = 0; i < node->parents.size(); ++i) {
        Node* p = node->parents[i].get();
        if (!p->requires_grad) continue;
        auto [slot, inserted] = adj_.try_emplace(p);
        if (inserted) slot->second.assign(p->numel(), T(0));
        parent_adj[i] = slot->second.data();
      }
      node->backward(node, found->second.data(), parent_adj);
      adj_.erase(found);
    }
  }

  // Adjoint of a tensor in the graph; zeros if it never received gradient.
  std::vector<T> grad_of(const Tensor<T>& t) const {
    ATSS_CHECK(ran_, "grad_of before backward()");
    auto it = adj_.find(t.node());
    if (it == adj_.end()) return std::vector<T>(t.numel(), T(0));
    return it->second;
  }

  // Accumulates leaf adjoints into the tensors' persistent .grad buffers.
  void accumulate_into_grads() {
    ATSS_CHECK(ran_, "accumulate_into_grads before backward()");
    for (auto& [node, adj] : adj_) {
      if (!node->backward && node->requires_grad) {
        if (node->grad.empty()) node->grad.assign(node->numel(), T(0));
        for (int64_t i = 0; i < node->numel(); ++i) node->grad[i] += adj[i];
      }
    }
  }

 private:
  std::shared_ptr<Node> root_;
  std::vector<Node*> order_;
  std::unordered_map<Node*, std::vector<T>> adj_;
  bool ran_ = false;
};

template <class T>
void Tensor<T>::backward() const {
  GradTape<T> tape(*this);
  tape.backward();
  tape.accumulate_into_grads();
}

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<T>> m, v;

  void init(const std::vector<Tensor<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
    step = 0;
  }
};

// Standard bias-corrected Adam update; moment math runs in double.
template <class T>
void adam_step(std::vector<Tensor<T>>& params,
               const std::vector<std::vector<T>>& grads, AdamState<T>& state) {
  ATSS_CHECK(params.size() == grads.size() && params.size() == state.m.size(),
             "adam_step: state/parameter arity mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (size_t p = 0; p < params.size(); ++p) {
    auto& value = params[p].mutable_data();
    ATSS_CHECK(grads[p].size() == value.size(),
               "adam_step: gradient shape mismatch");
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (size_t i = 0; i < value.size(); ++i) {
      const double g = grads[p][i];
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      value[i] -= static_cast<T>(state.lr * (mi / bc1) /
                                 (std::sqrt(vi / bc2) + state.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

// Central-difference check of a scalar-valued closure against the reverse
// pass. Returns max over coordinates of |analytic - numeric| /
// max(1, |analytic|, |numeric|).
template <class T>
double grad_check(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& op,
    std::vector<Tensor<T>> inputs, double h = 1e-3) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tensor<T> out = op(inputs);
  ATSS_CHECK(out.numel() == 1, "grad_check: op must be scalar-valued");
  GradTape<T> tape(out);
  tape.backward();

  double max_rel = 0.0;
  for (auto& input : inputs) {
    const std::vector<T> analytic = tape.grad_of(input);
    auto& data = input.mutable_data();
    for (size_t i = 0; i < data.size(); ++i) {
      const T orig = data[i];
      double fp, fm;
      {
        NoGradGuard ng;
        data[i] = static_cast<T>(orig + h);
        fp = static_cast<double>(op(inputs).item());
        data[i] = static_cast<T>(orig - h);
        fm = static_cast<double>(op(inputs).item());
        data[i] = orig;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) /
                         std::max({1.0, std::abs(a), std::abs(numeric)});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace atss

#endif  // ATSS_TENSOR_HPP_
