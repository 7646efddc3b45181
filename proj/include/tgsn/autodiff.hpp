#pragma once

// Dense row-major tensors with reverse-mode differentiation. Tensor is a
// shared handle onto a graph node; copying a Tensor aliases the same node.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tgsn/error.hpp"
#include "tgsn/rng.hpp"

namespace tgsn::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
  fail(ErrorCode::ShapeError,
       std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

namespace detail {
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph construction on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;

  std::vector<T>& g() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel(shape) != values.size())
      fail(ErrorCode::ShapeError, "data length " + std::to_string(values.size()) +
                                      " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto count = numel(shape);
    return from(std::move(shape), std::vector<T>(count, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto count = numel(shape);
    return from(std::move(shape), std::vector<T>(count, v), requires_grad);
  }
  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  T item() const { return node_->value.at(0); }
  T operator[](std::size_t i) const { return node_->value[i]; }

  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  Node<T>* raw() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

inline constexpr std::size_t kRowTile = 32;

// y[j] += sum_r c[r] * x[r][j] for r < m (m <= 4), accumulated in ascending r.
template <class T>
inline void axpy_multi(T* y, std::size_t n, const T* c, const T* const* x, std::size_t m) {
  if (m == 4) {
    const T c0 = c[0], c1 = c[1], c2 = c[2], c3 = c[3];
    const T *x0 = x[0], *x1 = x[1], *x2 = x[2], *x3 = x[3];
    for (std::size_t j = 0; j < n; ++j) {
      T acc = y[j];
      acc += c0 * x0[j];
      acc += c1 * x1[j];
      acc += c2 * x2[j];
      acc += c3 * x3[j];
      y[j] = acc;
    }
    return;
  }
  for (std::size_t r = 0; r < m; ++r) {
    const T cr = c[r];
    const T* xr = x[r];
    for (std::size_t j = 0; j < n; ++j) y[j] += cr * xr[j];
  }
}

// Y[i, :] += sum_k A[i, k] * B[k, :] for rows i of a tile; k visited in ascending order.
template <class T>
inline void gemm_rows(T* Y, const T* A, const T* B, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i0 = 0; i0 < M; i0 += kRowTile) {
    const std::size_t i1 = std::min(M, i0 + kRowTile);
    for (std::size_t k = 0; k < K; k += 4) {
      const std::size_t m = std::min<std::size_t>(4, K - k);
      const T* rows[4] = {B + k * N, nullptr, nullptr, nullptr};
      for (std::size_t r = 1; r < m; ++r) rows[r] = B + (k + r) * N;
      for (std::size_t i = i0; i < i1; ++i) axpy_multi(Y + i * N, N, A + i * K + k, rows, m);
    }
  }
}

// Y[k, :] += sum_i A[i, k] * G[i, :]; i visited in ascending order.
template <class T>
inline void gemm_tn(T* Y, const T* A, const T* G, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; i += 4) {
    const std::size_t m = std::min<std::size_t>(4, M - i);
    const T* rows[4] = {G + i * N, nullptr, nullptr, nullptr};
    for (std::size_t r = 1; r < m; ++r) rows[r] = G + (i + r) * N;
    T c[4];
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t r = 0; r < m; ++r) c[r] = A[(i + r) * K + k];
      axpy_multi(Y + k * N, N, c, rows, m);
    }
  }
}

template <class T>
std::vector<T> transpose(const std::vector<T>& a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (grad_enabled()) {
    for (const auto* in : inputs)
      if (in && in->defined() && in->requires_grad()) n->requires_grad = true;
    if (n->requires_grad)
      for (const auto* in : inputs)
        if (in && in->defined()) n->parents.push_back(in->node());
  }
  return Tensor<T>(std::move(n));
}

}  // namespace detail

// Reverse pass from a scalar (or from `seed` for non-scalar roots). Each node
// in the reachable subgraph runs its backward exactly once, in reverse
// topological order.
template <class T>
void backward(const Tensor<T>& root, std::span<const T> seed = {}) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.raw(), 0);
  seen.insert(root.raw());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  auto& g = root.raw()->g();
  if (seed.empty()) {
    if (root.size() != 1) fail(ErrorCode::ShapeError, "backward needs a scalar root or a seed");
    g[0] += T(1);
  } else {
    if (seed.size() != g.size()) fail(ErrorCode::ShapeError, "seed size mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward && !(*it)->grad.empty()) (*it)->backward();
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  auto out = detail::make_result<T>(a.shape(), std::move(v), "add", {&a, &b});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pa = a.raw(), pb = b.raw()] {
      if (pa->requires_grad) {
        auto& g = pa->g();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
      if (pb->requires_grad) {
        auto& g = pb->g();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  auto out = detail::make_result<T>(a.shape(), std::move(v), "mul", {&a, &b});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pa = a.raw(), pb = b.raw()] {
      if (pa->requires_grad) {
        auto& g = pa->g();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        auto& g = pb->g();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * pa->value[i];
      }
    };
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * c;
  auto out = detail::make_result<T>(a.shape(), std::move(v), "scale", {&a});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pa = a.raw(), c] {
      auto& g = pa->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * c;
    };
  }
  return out;
}

namespace detail {

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& a, const char* op, F f, DF df) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a[i]);
  auto out = make_result<T>(a.shape(), std::move(v), op, {&a});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pa = a.raw(), df] {
      auto& g = pa->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * df(pa->value[i], o->value[i]);
    };
  }
  return out;
}

}  // namespace detail

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary(
      a, "gelu", [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid",
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

// Softmax along the last dimension.
template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.size() / n;
  std::vector<T> v(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * n;
    T* y = v.data() + r * n;
    T mx = *std::max_element(x, x + n);
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += (y[i] = std::exp(x[i] - mx));
    for (std::size_t i = 0; i < n; ++i) y[i] /= s;
  }
  auto out = detail::make_result<T>(a.shape(), std::move(v), "softmax", {&a});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pa = a.raw(), n, rows] {
      auto& g = pa->g();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = o->value.data() + r * n;
        const T* gy = o->grad.data() + r * n;
        T dot = 0;
        for (std::size_t i = 0; i < n; ++i) dot += y[i] * gy[i];
        for (std::size_t i = 0; i < n; ++i) g[r * n + i] += y[i] * (gy[i] - dot);
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_error("matmul", a.shape(), b.shape());
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> v(M * N, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  detail::gemm_rows(v.data(), A, B, M, K, N);
  auto out = detail::make_result<T>({M, N}, std::move(v), "matmul", {&a, &b});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pa = a.raw(), pb = b.raw(), M, K, N] {
      const T* G = o->grad.data();
      if (pa->requires_grad) {
        auto& ga = pa->g();
        const auto bt = detail::transpose(pb->value, K, N);
        detail::gemm_rows(ga.data(), G, bt.data(), M, N, K);
      }
      if (pb->requires_grad) detail::gemm_tn(pb->g().data(), pa->value.data(), G, M, K, N);
    };
  }
  return out;
}

// x[..., K] * w[K, N] + bias[N]; leading dimensions are treated as rows.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0)) shape_error("linear", x.shape(), w.shape());
  const std::size_t K = w.dim(0), N = w.dim(1), R = x.size() / K;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != N))
    shape_error("linear(bias)", w.shape(), bias.shape());
  Shape os = x.shape();
  os.back() = N;
  std::vector<T> v(R * N);
  const T* X = x.data().data();
  const T* W = w.data().data();
  for (std::size_t r = 0; r < R; ++r) {
    T* row = v.data() + r * N;
    if (bias.defined()) std::copy_n(bias.data().data(), N, row);
    else std::fill_n(row, N, T(0));
  }
  detail::gemm_rows(v.data(), X, W, R, K, N);
  auto out = detail::make_result<T>(std::move(os), std::move(v), "linear", {&x, &w, &bias});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw(), pw = w.raw(),
                           pbias = bias.defined() ? bias.raw() : nullptr, K, N, R] {
      const T* G = o->grad.data();
      if (px->requires_grad) {
        auto& gx = px->g();
        const auto wt = detail::transpose(pw->value, K, N);
        detail::gemm_rows(gx.data(), G, wt.data(), R, N, K);
      }
      if (pw->requires_grad) detail::gemm_tn(pw->g().data(), px->value.data(), G, R, K, N);
      if (pbias && pbias->requires_grad) {
        auto& gb = pbias->g();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t j = 0; j < N; ++j) gb[j] += G[r * N + j];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions on [N, C, H, W] maps

// Pointwise convolution: w[Cout, Cin], bias[Cout].
template <class T>
Tensor<T> conv2d_1x1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {}) {
  if (x.rank() != 4 || w.rank() != 2 || w.dim(1) != x.dim(1))
    shape_error("conv2d_1x1", x.shape(), w.shape());
  const std::size_t N = x.dim(0), Ci = x.dim(1), P = x.dim(2) * x.dim(3), Co = w.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Co))
    shape_error("conv2d_1x1(bias)", w.shape(), bias.shape());
  std::vector<T> v(N * Co * P);
  const T* X = x.data().data();
  const T* W = w.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Co; ++o) {
      T* out = v.data() + (n * Co + o) * P;
      std::fill_n(out, P, bias.defined() ? bias[o] : T(0));
      for (std::size_t i = 0; i < Ci; ++i) {
        const T wi = W[o * Ci + i];
        const T* in = X + (n * Ci + i) * P;
        for (std::size_t p = 0; p < P; ++p) out[p] += wi * in[p];
      }
    }
  auto out = detail::make_result<T>({N, Co, x.dim(2), x.dim(3)}, std::move(v), "conv2d_1x1",
                                    {&x, &w, &bias});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw(), pw = w.raw(),
                           pb = bias.defined() ? bias.raw() : nullptr, N, Ci, Co, P] {
      const T* G = o->grad.data();
      if (px->requires_grad) {
        auto& gx = px->g();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t oc = 0; oc < Co; ++oc) {
            const T* g = G + (n * Co + oc) * P;
            for (std::size_t i = 0; i < Ci; ++i) {
              const T wi = pw->value[oc * Ci + i];
              T* gi = gx.data() + (n * Ci + i) * P;
              for (std::size_t p = 0; p < P; ++p) gi[p] += wi * g[p];
            }
          }
      }
      if (pw->requires_grad) {
        auto& gw = pw->g();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t oc = 0; oc < Co; ++oc) {
            const T* g = G + (n * Co + oc) * P;
            for (std::size_t i = 0; i < Ci; ++i) {
              const T* in = px->value.data() + (n * Ci + i) * P;
              T s = 0;
              for (std::size_t p = 0; p < P; ++p) s += in[p] * g[p];
              gw[oc * Ci + i] += s;
            }
          }
      }
      if (pb && pb->requires_grad) {
        auto& gb = pb->g();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t oc = 0; oc < Co; ++oc) {
            const T* g = G + (n * Co + oc) * P;
            T s = 0;
            for (std::size_t p = 0; p < P; ++p) s += g[p];
            gb[oc] += s;
          }
      }
    };
  }
  return out;
}

// Depthwise k x k convolution with zero "same" padding; w[C, k, k], bias[C].
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {},
                           std::size_t dilation = 1) {
  if (x.rank() != 4 || w.rank() != 3 || w.dim(0) != x.dim(1) || w.dim(1) != w.dim(2) ||
      w.dim(1) % 2 == 0)
    shape_error("depthwise_conv2d", x.shape(), w.shape());
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), K = w.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != C))
    shape_error("depthwise_conv2d(bias)", w.shape(), bias.shape());
  const auto r = static_cast<std::ptrdiff_t>(K / 2);
  const auto d = static_cast<std::ptrdiff_t>(dilation);
  const auto iH = static_cast<std::ptrdiff_t>(H), iW = static_cast<std::ptrdiff_t>(W);
  std::vector<T> v(x.size());
  const T* X = x.data().data();
  const T* Wt = w.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* in = X + (n * C + c) * H * W;
      T* out = v.data() + (n * C + c) * H * W;
      const T* kc = Wt + c * K * K;
      for (std::ptrdiff_t h = 0; h < iH; ++h)
        for (std::ptrdiff_t ww = 0; ww < iW; ++ww) {
          T s = bias.defined() ? bias[c] : T(0);
          for (std::ptrdiff_t u = -r; u <= r; ++u) {
            const auto hh = h + u * d;
            if (hh < 0 || hh >= iH) continue;
            for (std::ptrdiff_t q = -r; q <= r; ++q) {
              const auto wq = ww + q * d;
              if (wq < 0 || wq >= iW) continue;
              s += kc[(u + r) * static_cast<std::ptrdiff_t>(K) + (q + r)] * in[hh * iW + wq];
            }
          }
          out[h * iW + ww] = s;
        }
    }
  auto out = detail::make_result<T>(x.shape(), std::move(v), "depthwise_conv2d", {&x, &w, &bias});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw(), pw = w.raw(),
                           pb = bias.defined() ? bias.raw() : nullptr, N, C, H, W, K, r, d, iH,
                           iW] {
      const T* G = o->grad.data();
      T* gx = px->requires_grad ? px->g().data() : nullptr;
      T* gw = pw->requires_grad ? pw->g().data() : nullptr;
      T* gb = (pb && pb->requires_grad) ? pb->g().data() : nullptr;
      const auto iK = static_cast<std::ptrdiff_t>(K);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          const T* in = px->value.data() + (n * C + c) * H * W;
          const T* g = G + (n * C + c) * H * W;
          const T* kc = pw->value.data() + c * K * K;
          for (std::ptrdiff_t h = 0; h < iH; ++h)
            for (std::ptrdiff_t ww = 0; ww < iW; ++ww) {
              const T go = g[h * iW + ww];
              if (gb) gb[c] += go;
              for (std::ptrdiff_t u = -r; u <= r; ++u) {
                const auto hh = h + u * d;
                if (hh < 0 || hh >= iH) continue;
                for (std::ptrdiff_t q = -r; q <= r; ++q) {
                  const auto wq = ww + q * d;
                  if (wq < 0 || wq >= iW) continue;
                  const auto ki = (u + r) * iK + (q + r);
                  if (gx) gx[(n * C + c) * H * W + static_cast<std::size_t>(hh * iW + wq)] += kc[ki] * go;
                  if (gw) gw[c * K * K + static_cast<std::size_t>(ki)] += in[hh * iW + wq] * go;
                }
              }
            }
        }
    };
  }
  return out;
}

template <class T>
Tensor<T> depthwise_dilated_conv2d(const Tensor<T>& x, const Tensor<T>& w,
                                   const Tensor<T>& bias = {}, std::size_t dilation = 3) {
  return depthwise_conv2d(x, w, bias, dilation);
}

// ---------------------------------------------------------------------------
// Normalization

template <class T>
struct BatchNormBuffers {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormBuffers(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Per-channel normalization of [N, C, H, W] over (N, H, W). Train mode uses
// batch statistics and updates the running estimates.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormBuffers<T>& buf, bool train, T momentum = T(0.1),
                      T eps = T(1e-5)) {
  if (x.rank() != 4 || gamma.size() != x.dim(1) || beta.size() != x.dim(1) ||
      buf.running_mean.size() != x.dim(1))
    shape_error("batchnorm2d", x.shape(), gamma.shape());
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  const T M = static_cast<T>(N * P);
  std::vector<T> mean(C), invstd(C);
  const T* X = x.data().data();
  for (std::size_t c = 0; c < C; ++c) {
    if (train) {
      T s = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) s += X[(n * C + c) * P + p];
      const T mu = s / M;
      T ss = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) {
          const T dv = X[(n * C + c) * P + p] - mu;
          ss += dv * dv;
        }
      const T var = ss / M;
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = M > 1 ? ss / (M - 1) : var;
      buf.running_mean[c] = (T(1) - momentum) * buf.running_mean[c] + momentum * mu;
      buf.running_var[c] = (T(1) - momentum) * buf.running_var[c] + momentum * unbiased;
    } else {
      mean[c] = buf.running_mean[c];
      invstd[c] = T(1) / std::sqrt(buf.running_var[c] + eps);
    }
  }
  std::vector<T> xhat(x.size()), v(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const auto i = (n * C + c) * P + p;
        xhat[i] = (X[i] - mean[c]) * invstd[c];
        v[i] = gamma[c] * xhat[i] + beta[c];
      }
  auto out = detail::make_result<T>(x.shape(), std::move(v), "batchnorm2d", {&x, &gamma, &beta});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw(), pg = gamma.raw(), pbt = beta.raw(),
                           xhat = std::move(xhat), invstd = std::move(invstd), N, C, P, M,
                           train] {
      const T* G = o->grad.data();
      for (std::size_t c = 0; c < C; ++c) {
        T sg = 0, sgx = 0;
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t p = 0; p < P; ++p) {
            const auto i = (n * C + c) * P + p;
            sg += G[i];
            sgx += G[i] * xhat[i];
          }
        if (pg->requires_grad) pg->g()[c] += sgx;
        if (pbt->requires_grad) pbt->g()[c] += sg;
        if (px->requires_grad) {
          auto& gx = px->g();
          const T gam = pg->value[c];
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < P; ++p) {
              const auto i = (n * C + c) * P + p;
              if (train)
                gx[i] += gam * invstd[c] / M * (M * G[i] - sg - xhat[i] * sgx);
              else
                gx[i] += gam * invstd[c] * G[i];
            }
        }
      }
    };
  }
  return out;
}

// Normalizes over the last dimension with affine gamma/beta.
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(1e-5)) {
  const std::size_t E = x.shape().back();
  if (gamma.size() != E || beta.size() != E) shape_error("layernorm", x.shape(), gamma.shape());
  const std::size_t R = x.size() / E;
  std::vector<T> xhat(x.size()), v(x.size()), invstd(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* in = x.data().data() + r * E;
    T mu = 0;
    for (std::size_t e = 0; e < E; ++e) mu += in[e];
    mu /= static_cast<T>(E);
    T var = 0;
    for (std::size_t e = 0; e < E; ++e) var += (in[e] - mu) * (in[e] - mu);
    var /= static_cast<T>(E);
    invstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t e = 0; e < E; ++e) {
      xhat[r * E + e] = (in[e] - mu) * invstd[r];
      v[r * E + e] = gamma[e] * xhat[r * E + e] + beta[e];
    }
  }
  auto out = detail::make_result<T>(x.shape(), std::move(v), "layernorm", {&x, &gamma, &beta});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw(), pg = gamma.raw(), pb = beta.raw(),
                           xhat = std::move(xhat), invstd = std::move(invstd), E, R] {
      const T* G = o->grad.data();
      std::vector<T> dxh(E);
      for (std::size_t r = 0; r < R; ++r) {
        T s1 = 0, s2 = 0;
        for (std::size_t e = 0; e < E; ++e) {
          const auto i = r * E + e;
          if (pg->requires_grad) pg->g()[e] += G[i] * xhat[i];
          if (pb->requires_grad) pb->g()[e] += G[i];
          dxh[e] = G[i] * pg->value[e];
          s1 += dxh[e];
          s2 += dxh[e] * xhat[i];
        }
        if (px->requires_grad) {
          auto& gx = px->g();
          const T En = static_cast<T>(E);
          for (std::size_t e = 0; e < E; ++e) {
            const auto i = r * E + e;
            gx[i] += invstd[r] / En * (En * dxh[e] - s1 - xhat[i] * s2);
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", x.shape(), shape);
  auto out = detail::make_result<T>(std::move(shape), x.values(), "reshape", {&x});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw()] {
      auto& g = px->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
    };
  }
  return out;
}

// [N, 2C, H, W] -> ([N, C, H, W], [N, C, H, W]).
template <class T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x) {
  if (x.rank() != 4 || x.dim(1) % 2 != 0) shape_error("split_channels", x.shape(), x.shape());
  const std::size_t N = x.dim(0), C2 = x.dim(1), C = C2 / 2, P = x.dim(2) * x.dim(3);
  Shape hs = {N, C, x.dim(2), x.dim(3)};
  auto part = [&](std::size_t off) {
    std::vector<T> v(N * C * P);
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(x.data().data() + (n * C2 + off) * P, C * P, v.data() + n * C * P);
    auto out = detail::make_result<T>(hs, std::move(v), "split_channels", {&x});
    if (out.requires_grad()) {
      out.raw()->backward = [o = out.raw(), px = x.raw(), off, N, C, C2, P] {
        auto& g = px->g();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t i = 0; i < C * P; ++i) g[(n * C2 + off) * P + i] += o->grad[n * C * P + i];
      };
    }
    return out;
  };
  return {part(0), part(C)};
}

// [N, E, H, W] -> [N, H*W, E]; token index is h*W + w.
template <class T>
Tensor<T> flatten_permute(const Tensor<T>& x) {
  if (x.rank() != 4) shape_error("flatten_permute", x.shape(), x.shape());
  const std::size_t N = x.dim(0), E = x.dim(1), P = x.dim(2) * x.dim(3);
  std::vector<T> v(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t e = 0; e < E; ++e)
      for (std::size_t p = 0; p < P; ++p) v[(n * P + p) * E + e] = x[(n * E + e) * P + p];
  auto out = detail::make_result<T>({N, P, E}, std::move(v), "flatten_permute", {&x});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw(), N, E, P] {
      auto& g = px->g();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t e = 0; e < E; ++e)
          for (std::size_t p = 0; p < P; ++p) g[(n * E + e) * P + p] += o->grad[(n * P + p) * E + e];
    };
  }
  return out;
}

// Multiplies x[N, C, ...] by v[C] along dimension 1.
template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() < 2 || v.size() != x.dim(1)) shape_error("scale_channels", x.shape(), v.shape());
  const std::size_t N = x.dim(0), C = x.dim(1), P = x.size() / (N * C);
  std::vector<T> out_v(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const auto i = (n * C + c) * P + p;
        out_v[i] = x[i] * v[c];
      }
  auto out = detail::make_result<T>(x.shape(), std::move(out_v), "scale_channels", {&x, &v});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw(), pv = v.raw(), N, C, P] {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t p = 0; p < P; ++p) {
            const auto i = (n * C + c) * P + p;
            if (px->requires_grad) px->g()[i] += o->grad[i] * pv->value[c];
            if (pv->requires_grad) pv->g()[c] += o->grad[i] * px->value[i];
          }
    };
  }
  return out;
}

// Repeats q (any shape, E elements) into [N, 1, E].
template <class T>
Tensor<T> broadcast_batch(const Tensor<T>& q, std::size_t N) {
  const std::size_t E = q.size();
  std::vector<T> v(N * E);
  for (std::size_t n = 0; n < N; ++n) std::copy_n(q.data().data(), E, v.data() + n * E);
  auto out = detail::make_result<T>({N, 1, E}, std::move(v), "broadcast_batch", {&q});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pq = q.raw(), N, E] {
      auto& g = pq->g();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t e = 0; e < E; ++e) g[e] += o->grad[n * E + e];
    };
  }
  return out;
}

// [N, L, E] -> [N, E] averaging over tokens.
template <class T>
Tensor<T> mean_tokens(const Tensor<T>& x) {
  if (x.rank() != 3) shape_error("mean_tokens", x.shape(), x.shape());
  const std::size_t N = x.dim(0), L = x.dim(1), E = x.dim(2);
  std::vector<T> v(N * E, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t e = 0; e < E; ++e) v[n * E + e] += x[(n * L + l) * E + e] / static_cast<T>(L);
  auto out = detail::make_result<T>({N, E}, std::move(v), "mean_tokens", {&x});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw(), N, L, E] {
      auto& g = px->g();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t e = 0; e < E; ++e)
            g[(n * L + l) * E + e] += o->grad[n * E + e] / static_cast<T>(L);
    };
  }
  return out;
}

// Rows of table[D, H] selected by index -> [N, H].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::size_t>& index) {
  if (table.rank() != 2) shape_error("embedding", table.shape(), table.shape());
  const std::size_t D = table.dim(0), H = table.dim(1), N = index.size();
  std::vector<T> v(N * H);
  for (std::size_t n = 0; n < N; ++n) {
    if (index[n] >= D) fail(ErrorCode::ShapeError, "embedding index out of range");
    std::copy_n(table.data().data() + index[n] * H, H, v.data() + n * H);
  }
  auto out = detail::make_result<T>({N, H}, std::move(v), "embedding", {&table});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pt = table.raw(), index, H] {
      auto& g = pt->g();
      for (std::size_t n = 0; n < index.size(); ++n)
        for (std::size_t h = 0; h < H; ++h) g[index[n] * H + h] += o->grad[n * H + h];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stochastic regularizers

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool train, Rng* rng) {
  if (!train || p <= 0.0) return x;
  std::vector<T> mask(x.size());
  const T keep_scale = p >= 1.0 ? T(0) : static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : mask) m = (p < 1.0 && uniform01(*rng) >= p) ? keep_scale : T(0);
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] * mask[i];
  auto out = detail::make_result<T>(x.shape(), std::move(v), "dropout", {&x});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw(), mask = std::move(mask)] {
      auto& g = px->g();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * mask[i];
    };
  }
  return out;
}

// Stochastic depth: zeroes the whole residual branch of each sample (dim 0)
// with probability p and rescales survivors by 1/(1-p). Identity in eval mode.
template <class T>
Tensor<T> droppath(const Tensor<T>& x, double p, bool train, Rng* rng) {
  if (!train || p <= 0.0) return x;
  const std::size_t N = x.dim(0), per = x.size() / N;
  std::vector<T> keep(N);
  const T keep_scale = p >= 1.0 ? T(0) : static_cast<T>(1.0 / (1.0 - p));
  for (auto& k : keep) k = (p < 1.0 && uniform01(*rng) >= p) ? keep_scale : T(0);
  std::vector<T> v(x.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < per; ++i) v[n * per + i] = x[n * per + i] * keep[n];
  auto out = detail::make_result<T>(x.shape(), std::move(v), "droppath", {&x});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw(), keep = std::move(keep), N, per] {
      auto& g = px->g();
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < per; ++i) g[n * per + i] += o->grad[n * per + i] * keep[n];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

// Multi-head scaled dot-product attention. q[N, Lq, E], k and v [N, L, E];
// E is split into `heads` contiguous slices. If `weights` is given it receives
// the attention probabilities laid out [N, heads, Lq, L].
template <class T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k,
                                       const Tensor<T>& v, std::size_t heads,
                                       std::vector<T>* weights = nullptr) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() ||
      q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2))
    shape_error("scaled_dot_product_attention", q.shape(), k.shape());
  const std::size_t N = q.dim(0), Lq = q.dim(1), L = k.dim(1), E = q.dim(2);
  if (heads == 0 || E % heads != 0)
    fail(ErrorCode::ShapeError, "embedding " + std::to_string(E) + " not divisible by " +
                                    std::to_string(heads) + " heads");
  const std::size_t dh = E / heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> attn(N * heads * Lq * L);
  std::vector<T> out_v(N * Lq * E, T(0));
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < Lq; ++i) {
        T* a = attn.data() + ((n * heads + h) * Lq + i) * L;
        const T* qi = Q + (n * Lq + i) * E + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          const T* kj = K + (n * L + j) * E + h * dh;
          T s = 0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          a[j] = s * inv;
          mx = std::max(mx, a[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < L; ++j) z += (a[j] = std::exp(a[j] - mx));
        for (std::size_t j = 0; j < L; ++j) a[j] /= z;
        T* oi = out_v.data() + (n * Lq + i) * E + h * dh;
        for (std::size_t j = 0; j < L; ++j) {
          const T* vj = V + (n * L + j) * E + h * dh;
          for (std::size_t t = 0; t < dh; ++t) oi[t] += a[j] * vj[t];
        }
      }
  if (weights) *weights = attn;
  auto out = detail::make_result<T>({N, Lq, E}, std::move(out_v), "attention", {&q, &k, &v});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pq = q.raw(), pk = k.raw(), pv = v.raw(),
                           attn = std::move(attn), N, Lq, L, E, heads, dh, inv] {
      const T* G = o->grad.data();
      T* gq = pq->requires_grad ? pq->g().data() : nullptr;
      T* gk = pk->requires_grad ? pk->g().data() : nullptr;
      T* gv = pv->requires_grad ? pv->g().data() : nullptr;
      std::vector<T> da(L);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t i = 0; i < Lq; ++i) {
            const T* a = attn.data() + ((n * heads + h) * Lq + i) * L;
            const T* gi = G + (n * Lq + i) * E + h * dh;
            T dot = 0;
            for (std::size_t j = 0; j < L; ++j) {
              const T* vj = pv->value.data() + (n * L + j) * E + h * dh;
              T s = 0;
              for (std::size_t t = 0; t < dh; ++t) s += gi[t] * vj[t];
              da[j] = s;
              dot += a[j] * s;
              if (gv) {
                T* gvj = gv + (n * L + j) * E + h * dh;
                for (std::size_t t = 0; t < dh; ++t) gvj[t] += a[j] * gi[t];
              }
            }
            const T* qi = pq->value.data() + (n * Lq + i) * E + h * dh;
            for (std::size_t j = 0; j < L; ++j) {
              const T ds = a[j] * (da[j] - dot) * inv;
              const T* kj = pk->value.data() + (n * L + j) * E + h * dh;
              if (gq) {
                T* gqi = gq + (n * Lq + i) * E + h * dh;
                for (std::size_t t = 0; t < dh; ++t) gqi[t] += ds * kj[t];
              }
              if (gk) {
                T* gkj = gk + (n * L + j) * E + h * dh;
                for (std::size_t t = 0; t < dh; ++t) gkj[t] += ds * qi[t];
              }
            }
          }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto out = detail::make_result<T>({1}, {s}, "sum", {&x});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), px = x.raw()] {
      auto& g = px->g();
      for (auto& gi : g) gi += o->grad[0];
    };
  }
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

// Mean cross-entropy of logits[N, K] against integer targets.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size())
    fail(ErrorCode::ShapeError, "cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                                    std::to_string(targets.size()) + " targets");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<T> prob(N * K);
  T loss = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (targets[n] < 0 || static_cast<std::size_t>(targets[n]) >= K)
      fail(ErrorCode::ClassOutOfRange, "class target " + std::to_string(targets[n]) +
                                           " outside [0," + std::to_string(K) + ")");
    const T* x = logits.data().data() + n * K;
    T mx = *std::max_element(x, x + K);
    T z = 0;
    for (std::size_t k = 0; k < K; ++k) z += (prob[n * K + k] = std::exp(x[k] - mx));
    for (std::size_t k = 0; k < K; ++k) prob[n * K + k] /= z;
    loss += -(x[targets[n]] - mx - std::log(z));
  }
  loss /= static_cast<T>(N);
  auto out = detail::make_result<T>({1}, {loss}, "cross_entropy", {&logits});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pl = logits.raw(), prob = std::move(prob), targets, N,
                           K] {
      auto& g = pl->g();
      const T s = o->grad[0] / static_cast<T>(N);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < K; ++k)
          g[n * K + k] += s * (prob[n * K + k] - (static_cast<int>(k) == targets[n] ? T(1) : T(0)));
    };
  }
  return out;
}

// Mean squared error against a constant target of the same element count.
template <class T>
Tensor<T> mse(const Tensor<T>& pred, const std::vector<T>& target) {
  if (pred.size() != target.size())
    fail(ErrorCode::ShapeError, "mse: " + std::to_string(pred.size()) + " predictions vs " +
                                    std::to_string(target.size()) + " targets");
  T s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  const T n = static_cast<T>(target.size());
  auto out = detail::make_result<T>({1}, {s / n}, "mse", {&pred});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pp = pred.raw(), target, n] {
      auto& g = pp->g();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += o->grad[0] * T(2) * (pp->value[i] - target[i]) / n;
    };
  }
  return out;
}

// Mean squared error over the rows with mask[i] != 0; zero when no row is selected.
template <class T>
Tensor<T> masked_mse(const Tensor<T>& pred, const std::vector<T>& target,
                     const std::vector<unsigned char>& mask) {
  if (pred.size() != target.size() || mask.size() != target.size())
    fail(ErrorCode::ShapeError, "masked_mse: " + std::to_string(pred.size()) + " predictions vs " +
                                    std::to_string(target.size()) + " targets and " +
                                    std::to_string(mask.size()) + " mask entries");
  T s = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < target.size(); ++i)
    if (mask[i]) {
      s += (pred[i] - target[i]) * (pred[i] - target[i]);
      ++count;
    }
  const T n = static_cast<T>(std::max<std::size_t>(count, 1));
  auto out = detail::make_result<T>({1}, {s / n}, "masked_mse", {&pred});
  if (out.requires_grad()) {
    out.raw()->backward = [o = out.raw(), pp = pred.raw(), target, mask, n] {
      auto& g = pp->g();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (mask[i]) g[i] += o->grad[0] * T(2) * (pp->value[i] - target[i]) / n;
    };
  }
  return out;
}

}  // namespace tgsn::ad
