#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
// Values are immutable once an op has consumed them; the tape is a DAG of
// shared_ptr nodes freed when the loss handle goes out of scope. Heavy
// kernels (matmul, conv) run through Eigen; everything else is plain loops.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "mlkd/common.hpp"

namespace mlkd {

using Shape = std::vector<int64_t>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    Buffer<T> value;
    Buffer<T> grad;  // allocated lazily, kept across backward calls
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // empty for leaves

    int64_t numel() const { return product(shape); }
    bool is_leaf() const { return !backward_fn; }
    Buffer<T>& ensure_grad() {
      if (grad.size() != value.size()) grad.assign(value.size(), T(0));
      return grad;
    }
  };
  using NodePtr = std::shared_ptr<Node>;

  Tensor() : node_(std::make_shared<Node>()) {}

  static Tensor from(Shape shape, Buffer<T> data, bool requires_grad = false) {
    if (product(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, const std::vector<T>& data, bool requires_grad = false) {
    return from(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad);
  }

  static Tensor from(Shape shape, std::initializer_list<T> data, bool requires_grad = false) {
    return from(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    int64_t n = product(shape);
    return from(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    int64_t n = product(shape);
    return from(std::move(shape), Buffer<T>(n, v), requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape.at(i); }
  size_t rank() const { return node_->shape.size(); }
  int64_t numel() const { return node_->numel(); }

  Buffer<T>& value() { return node_->value; }
  const Buffer<T>& value() const { return node_->value; }

  T item() const {
    if (numel() != 1)
      throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) + " elements");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rq) { node_->requires_grad = rq; }

  Buffer<T>& grad() { return node_->ensure_grad(); }
  const Buffer<T>& grad() const { return const_cast<Node&>(*node_).ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  /// Leaf copy sharing no history with this tensor.
  Tensor detach() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  Tensor clone(bool requires_grad = false) const {
    Tensor t = detach();
    t.node_->requires_grad = requires_grad;
    return t;
  }

  NodePtr node() const { return node_; }

  static Tensor wrap(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  NodePtr node_;
};

// ---------------------------------------------------------------------------
// broadcasting (trailing-dimension alignment)
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t d = 0; d < r; ++d) {
    int64_t da = d < r - a.size() ? 1 : a[d - (r - a.size())];
    int64_t db = d < r - b.size() ? 1 : b[d - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    out[d] = std::max(da, db);
  }
  return out;
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t d = static_cast<int64_t>(s.size()) - 2; d >= 0; --d)
    st[d] = st[d + 1] * s[d + 1];
  return st;
}

/// Strides of `shape` aligned to broadcast result `out`; 0 on broadcast dims.
inline std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  auto own = row_major_strides(shape);
  std::vector<int64_t> st(out.size(), 0);
  size_t off = out.size() - shape.size();
  for (size_t d = 0; d < shape.size(); ++d)
    st[off + d] = (shape[d] == 1 && out[off + d] != 1) ? 0 : own[d];
  return st;
}

/// Walk the output space of a binary broadcast, yielding (i_out, i_a, i_b).
template <typename F>
inline void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                               const std::vector<int64_t>& sb, F&& fn) {
  int64_t n = product(out);
  size_t r = out.size();
  if (r == 0) {
    if (n > 0) fn(int64_t(0), int64_t(0), int64_t(0));
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (int64_t d = static_cast<int64_t>(r) - 1; d >= 0; --d) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// ---------------------------------------------------------------------------
// op construction helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> value,
                      std::vector<typename Tensor<T>::NodePtr> parents,
                      std::function<void(typename Tensor<T>::Node&)> backward_fn) {
  bool rq = false;
  for (auto& p : parents) rq = rq || p->requires_grad;
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(value));
  if (rq) {
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

// Elementwise binary op. FwdF: (a,b)->out. DaF/DbF: (a,b,out)->partial.
template <typename T, typename FwdF, typename DaF, typename DbF>
Tensor<T> binary_ew(const Tensor<T>& a, const Tensor<T>& b, FwdF fwd, DaF da, DbF db) {
  auto na = a.node();
  auto nb = b.node();
  if (na->shape == nb->shape) {  // fast path, no odometer
    int64_t n = na->numel();
    Buffer<T> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(na->value[i], nb->value[i]);
    auto bwd = [na, nb, da, db](typename Tensor<T>::Node& self) {
      int64_t m = self.numel();
      if (na->requires_grad) {
        auto& g = na->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          g[i] += da(na->value[i], nb->value[i], self.value[i]) * self.grad[i];
      }
      if (nb->requires_grad) {
        auto& g = nb->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          g[i] += db(na->value[i], nb->value[i], self.value[i]) * self.grad[i];
      }
    };
    return make_result<T>(na->shape, std::move(out), {na, nb}, bwd);
  }
  Shape os = broadcast_shape(na->shape, nb->shape);
  auto sa = broadcast_strides(na->shape, os);
  auto sb = broadcast_strides(nb->shape, os);
  Buffer<T> out(product(os));
  for_each_broadcast(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
    out[i] = fwd(na->value[ia], nb->value[ib]);
  });
  auto bwd = [na, nb, os, sa, sb, da, db](typename Tensor<T>::Node& self) {
    if (na->requires_grad) {
      auto& g = na->ensure_grad();
      for_each_broadcast(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
        g[ia] += da(na->value[ia], nb->value[ib], self.value[i]) * self.grad[i];
      });
    }
    if (nb->requires_grad) {
      auto& g = nb->ensure_grad();
      for_each_broadcast(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
        g[ib] += db(na->value[ia], nb->value[ib], self.value[i]) * self.grad[i];
      });
    }
  };
  return make_result<T>(os, std::move(out), {na, nb}, bwd);
}

// Elementwise unary op. FwdF: x->y. DF: (x,y)->dy/dx.
template <typename T, typename FwdF, typename DF>
Tensor<T> unary_ew(const Tensor<T>& a, FwdF fwd, DF dfn) {
  auto na = a.node();
  int64_t n = na->numel();
  Buffer<T> out(n);
  for (int64_t i = 0; i < n; ++i) out[i] = fwd(na->value[i]);
  auto bwd = [na, dfn](typename Tensor<T>::Node& self) {
    if (!na->requires_grad) return;
    auto& g = na->ensure_grad();
    int64_t m = self.numel();
    for (int64_t i = 0; i < m; ++i)
      g[i] += dfn(na->value[i], self.value[i]) * self.grad[i];
  };
  return make_result<T>(na->shape, std::move(out), {na}, bwd);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise operations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(
      a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(
      a, b, [](T x, T y) { return std::pow(x, y); },
      [](T x, T y, T) { return y * std::pow(x, y - T(1)); },
      [](T x, T, T o) { return o * std::log(x); });
}

template <typename T>
Tensor<T> pow(const Tensor<T>& a, T e) {
  return detail::unary_ew(
      a, [e](T x) { return std::pow(x, e); },
      [e](T x, T) { return e * std::pow(x, e - T(1)); });
}

/// Elementwise maximum; at ties the gradient goes to the first operand.
template <typename T>
Tensor<T> max(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_ew(
      a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T) { return x >= y ? T(1) : T(0); },
      [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.value())
    if (!(v > T(0)))
      throw std::domain_error("log: non-positive input " + std::to_string(static_cast<double>(v)));
  return detail::unary_ew(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_ew(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary_ew(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_ew(
      a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_ew(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_ew(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// Square root with subgradient 0 at the origin (masked distances sit there).
template <typename T>
Tensor<T> sqrt0(const Tensor<T>& a) {
  return detail::unary_ew(
      a, [](T x) { return x > T(0) ? std::sqrt(x) : T(0); },
      [](T, T y) { return y > T(0) ? T(1) / (T(2) * y) : T(0); });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary_ew(
      a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

/// Elementwise Huber comparison: 0.5(a-b)^2 inside unit residual, |a-b|-0.5 outside.
template <typename T>
Tensor<T> huber_elem(const Tensor<T>& a, const Tensor<T>& b) {
  auto dpos = [](T x, T y, T) {
    T d = x - y;
    if (d > T(1)) return T(1);
    if (d < T(-1)) return T(-1);
    return d;
  };
  return detail::binary_ew(
      a, b,
      [](T x, T y) {
        T d = std::abs(x - y);
        return d <= T(1) ? T(0.5) * d * d : d - T(0.5);
      },
      dpos, [dpos](T x, T y, T o) { return -dpos(x, y, o); });
}

// scalar-operand conveniences
template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, T s) { return div(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> div(T s, const Tensor<T>& a) { return div(Tensor<T>::scalar(s), a); }

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, s); }
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return mul(a, s); }
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T s) { return add(a, s); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, T s) { return sub(a, s); }
template <typename T>
Tensor<T> operator-(T s, const Tensor<T>& a) { return sub(Tensor<T>::scalar(s), a); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

// ---------------------------------------------------------------------------
// shape operations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  auto na = a.node();
  if (product(shape) != na->numel())
    throw ShapeError("reshape: cannot view " + shape_str(na->shape) + " as " + shape_str(shape));
  auto bwd = [na](typename Tensor<T>::Node& self) {
    auto& g = na->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  };
  return detail::make_result<T>(std::move(shape), na->value, {na}, bwd);
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& target) {
  auto na = a.node();
  Shape os = broadcast_shape(na->shape, target);
  if (os != target)
    throw ShapeError("broadcast_to: " + shape_str(na->shape) + " -> " + shape_str(target));
  auto sa = broadcast_strides(na->shape, os);
  std::vector<int64_t> sz(os.size(), 0);  // dummy second operand
  Buffer<T> out(product(os));
  for_each_broadcast(os, sa, sz, [&](int64_t i, int64_t ia, int64_t) {
    out[i] = na->value[ia];
  });
  auto bwd = [na, os, sa, sz](typename Tensor<T>::Node& self) {
    auto& g = na->ensure_grad();
    for_each_broadcast(os, sa, sz, [&](int64_t i, int64_t ia, int64_t) {
      g[ia] += self.grad[i];
    });
  };
  return detail::make_result<T>(os, std::move(out), {na}, bwd);
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<size_t>& perm) {
  auto na = a.node();
  size_t r = na->shape.size();
  if (perm.size() != r)
    throw ShapeError("permute: axes list length " + std::to_string(perm.size()) +
                     " does not match rank " + std::to_string(r));
  Shape os(r);
  for (size_t d = 0; d < r; ++d) os[d] = na->shape.at(perm[d]);
  auto in_strides = row_major_strides(na->shape);
  std::vector<int64_t> mapped(r);
  for (size_t d = 0; d < r; ++d) mapped[d] = in_strides[perm[d]];
  std::vector<int64_t> sz(r, 0);
  Buffer<T> out(product(os));
  for_each_broadcast(os, mapped, sz, [&](int64_t i, int64_t ia, int64_t) {
    out[i] = na->value[ia];
  });
  auto bwd = [na, os, mapped, sz](typename Tensor<T>::Node& self) {
    auto& g = na->ensure_grad();
    for_each_broadcast(os, mapped, sz, [&](int64_t i, int64_t ia, int64_t) {
      g[ia] += self.grad[i];
    });
  };
  return detail::make_result<T>(os, std::move(out), {na}, bwd);
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  size_t r = a.rank();
  if (r < 2) throw ShapeError("transpose_last2: rank must be >= 2");
  std::vector<size_t> perm(r);
  for (size_t d = 0; d < r; ++d) perm[d] = d;
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  auto na = a.node();
  T s = T(0);
  for (T v : na->value) s += v;
  auto bwd = [na](typename Tensor<T>::Node& self) {
    auto& g = na->ensure_grad();
    T gs = self.grad[0];
    for (auto& gi : g) gi += gs;
  };
  return detail::make_result<T>({}, {s}, {na}, bwd);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  auto na = a.node();
  int64_t n = na->numel();
  if (n == 0) throw ShapeError("mean_all: empty tensor");
  T s = T(0);
  for (T v : na->value) s += v;
  s /= static_cast<T>(n);
  auto bwd = [na, n](typename Tensor<T>::Node& self) {
    auto& g = na->ensure_grad();
    T gs = self.grad[0] / static_cast<T>(n);
    for (auto& gi : g) gi += gs;
  };
  return detail::make_result<T>({}, {s}, {na}, bwd);
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, size_t axis, bool keepdim = false) {
  auto na = a.node();
  size_t r = na->shape.size();
  if (axis >= r) throw ShapeError("sum_axis: axis out of range");
  int64_t outer = 1, inner = 1, ax = na->shape[axis];
  for (size_t d = 0; d < axis; ++d) outer *= na->shape[d];
  for (size_t d = axis + 1; d < r; ++d) inner *= na->shape[d];
  Shape os;
  for (size_t d = 0; d < r; ++d) {
    if (d == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(na->shape[d]);
    }
  }
  Buffer<T> out(outer * inner, T(0));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < ax; ++k) {
      const T* src = na->value.data() + (o * ax + k) * inner;
      T* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  auto bwd = [na, outer, inner, ax](typename Tensor<T>::Node& self) {
    auto& g = na->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t k = 0; k < ax; ++k) {
        T* dst = g.data() + (o * ax + k) * inner;
        const T* src = self.grad.data() + o * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
  };
  return detail::make_result<T>(std::move(os), std::move(out), {na}, bwd);
}

/// Numerically stable softmax over the last dimension.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  auto na = a.node();
  if (na->shape.empty() || na->shape.back() < 1)
    throw ShapeError("softmax_lastdim: last extent must be >= 1");
  int64_t c = na->shape.back();
  int64_t rows = na->numel() / c;
  Buffer<T> out(na->numel());
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = na->value.data() + r * c;
    T* y = out.data() + r * c;
    T m = x[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, x[j]);
    T s = T(0);
    for (int64_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - m);
      s += y[j];
    }
    for (int64_t j = 0; j < c; ++j) y[j] /= s;
  }
  auto bwd = [na, rows, c](typename Tensor<T>::Node& self) {
    auto& g = na->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * c;
      const T* go = self.grad.data() + r * c;
      T dot = T(0);
      for (int64_t j = 0; j < c; ++j) dot += go[j] * y[j];
      T* gi = g.data() + r * c;
      for (int64_t j = 0; j < c; ++j) gi[j] += y[j] * (go[j] - dot);
    }
  };
  return detail::make_result<T>(na->shape, std::move(out), {na}, bwd);
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// Supported forms:
//   [m,k] x [k,n]                     plain product
//   [...,m,k] x [k,n]                 leading dims flattened into rows
//   [d1..dl,m,k] x [d1..dl,k,n]       batched with identical leading dims
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  auto na = a.node();
  auto nb = b.node();
  const Shape& as = na->shape;
  const Shape& bs = nb->shape;
  if (as.size() < 2 || bs.size() < 2)
    throw ShapeError("matmul: operands must have rank >= 2");
  int64_t k = as[as.size() - 1];
  int64_t m = as[as.size() - 2];
  if (bs[bs.size() - 2] != k)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(as) + " x " + shape_str(bs));
  int64_t n = bs[bs.size() - 1];

  if (bs.size() == 2) {
    int64_t rows = na->numel() / k;  // all leading dims of a fold into rows
    Buffer<T> out(rows * n);
    ConstMatMap<T> A(na->value.data(), rows, k);
    ConstMatMap<T> B(nb->value.data(), k, n);
    MatMap<T> C(out.data(), rows, n);
    C.noalias() = A * B;
    Shape os(as.begin(), as.end() - 1);
    os.push_back(n);
    auto bwd = [na, nb, rows, k, n](typename Tensor<T>::Node& self) {
      ConstMatMap<T> G(self.grad.data(), rows, n);
      if (na->requires_grad) {
        MatMap<T> GA(na->ensure_grad().data(), rows, k);
        ConstMatMap<T> B(nb->value.data(), k, n);
        GA.noalias() += G * B.transpose();
      }
      if (nb->requires_grad) {
        MatMap<T> GB(nb->ensure_grad().data(), k, n);
        ConstMatMap<T> A(na->value.data(), rows, k);
        GB.noalias() += A.transpose() * G;
      }
    };
    return detail::make_result<T>(std::move(os), std::move(out), {na, nb}, bwd);
  }

  if (!std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2) ||
      as.size() != bs.size())
    throw ShapeError("matmul: batched leading dims disagree, " + shape_str(as) + " x " +
                     shape_str(bs));
  int64_t batch = na->numel() / (m * k);
  Buffer<T> out(batch * m * n);
  for (int64_t i = 0; i < batch; ++i) {
    ConstMatMap<T> A(na->value.data() + i * m * k, m, k);
    ConstMatMap<T> B(nb->value.data() + i * k * n, k, n);
    MatMap<T> C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  Shape os(as.begin(), as.end() - 2);
  os.push_back(m);
  os.push_back(n);
  auto bwd = [na, nb, batch, m, k, n](typename Tensor<T>::Node& self) {
    for (int64_t i = 0; i < batch; ++i) {
      ConstMatMap<T> G(self.grad.data() + i * m * n, m, n);
      if (na->requires_grad) {
        MatMap<T> GA(na->ensure_grad().data() + i * m * k, m, k);
        ConstMatMap<T> B(nb->value.data() + i * k * n, k, n);
        GA.noalias() += G * B.transpose();
      }
      if (nb->requires_grad) {
        MatMap<T> GB(nb->ensure_grad().data() + i * k * n, k, n);
        ConstMatMap<T> A(na->value.data() + i * m * k, m, k);
        GB.noalias() += A.transpose() * G;
      }
    }
  };
  return detail::make_result<T>(std::move(os), std::move(out), {na, nb}, bwd);
}

// ---------------------------------------------------------------------------
// spatial ops (NHWC)
// ---------------------------------------------------------------------------

/// 3x3 convolution, stride 1, zero padding 1. x: [b,H,W,Ci], w: [3,3,Ci,Co],
/// bias: [Co]. Runs as im2col + GEMM; the column buffer is kept for backward.
template <typename T>
Tensor<T> conv3x3_nhwc(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  auto nx = x.node();
  auto nw = w.node();
  auto nb = bias.node();
  if (nx->shape.size() != 4) throw ShapeError("conv3x3: input must be [b,H,W,C]");
  if (nw->shape.size() != 4 || nw->shape[0] != 3 || nw->shape[1] != 3)
    throw ShapeError("conv3x3: weight must be [3,3,Ci,Co]");
  int64_t b = nx->shape[0], H = nx->shape[1], W = nx->shape[2], ci = nx->shape[3];
  int64_t co = nw->shape[3];
  if (nw->shape[2] != ci)
    throw ShapeError("conv3x3: weight expects " + std::to_string(nw->shape[2]) +
                     " input channels, got " + std::to_string(ci));
  if (nb->shape != Shape{co}) throw ShapeError("conv3x3: bias must be [Co]");

  int64_t rows = b * H * W;
  int64_t kc = 9 * ci;
  auto col = std::make_shared<Buffer<T>>(rows * kc, T(0));
  {
    T* cp = col->data();
    const T* xp = nx->value.data();
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t xx = 0; xx < W; ++xx) {
          T* row = cp + ((ib * H + y) * W + xx) * kc;
          for (int64_t kh = 0; kh < 3; ++kh) {
            int64_t sy = y + kh - 1;
            if (sy < 0 || sy >= H) continue;
            for (int64_t kw = 0; kw < 3; ++kw) {
              int64_t sx = xx + kw - 1;
              if (sx < 0 || sx >= W) continue;
              const T* src = xp + ((ib * H + sy) * W + sx) * ci;
              std::copy(src, src + ci, row + (kh * 3 + kw) * ci);
            }
          }
        }
  }
  Buffer<T> out(rows * co);
  {
    ConstMatMap<T> C(col->data(), rows, kc);
    ConstMatMap<T> Wm(nw->value.data(), kc, co);  // [3,3,Ci,Co] is already [9Ci,Co]
    MatMap<T> O(out.data(), rows, co);
    O.noalias() = C * Wm;
    for (int64_t r = 0; r < rows; ++r) {
      T* op = out.data() + r * co;
      const T* bp = nb->value.data();
      for (int64_t c = 0; c < co; ++c) op[c] += bp[c];
    }
  }
  auto bwd = [nx, nw, nb, col, b, H, W, ci, co, rows, kc](typename Tensor<T>::Node& self) {
    ConstMatMap<T> G(self.grad.data(), rows, co);
    if (nb->requires_grad) {
      MatMap<T> GB(nb->ensure_grad().data(), 1, co);
      GB.noalias() += G.colwise().sum();
    }
    if (nw->requires_grad) {
      ConstMatMap<T> C(col->data(), rows, kc);
      MatMap<T> GW(nw->ensure_grad().data(), kc, co);
      GW.noalias() += C.transpose() * G;
    }
    if (nx->requires_grad) {
      Buffer<T> dcol(rows * kc);
      {
        ConstMatMap<T> Wm(nw->value.data(), kc, co);
        MatMap<T> DC(dcol.data(), rows, kc);
        DC.noalias() = G * Wm.transpose();
      }
      auto& gx = nx->ensure_grad();
      for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t y = 0; y < H; ++y)
          for (int64_t xx = 0; xx < W; ++xx) {
            const T* row = dcol.data() + ((ib * H + y) * W + xx) * kc;
            for (int64_t kh = 0; kh < 3; ++kh) {
              int64_t sy = y + kh - 1;
              if (sy < 0 || sy >= H) continue;
              for (int64_t kw = 0; kw < 3; ++kw) {
                int64_t sx = xx + kw - 1;
                if (sx < 0 || sx >= W) continue;
                T* dst = gx.data() + ((ib * H + sy) * W + sx) * ci;
                const T* src = row + (kh * 3 + kw) * ci;
                for (int64_t c = 0; c < ci; ++c) dst[c] += src[c];
              }
            }
          }
    }
  };
  return detail::make_result<T>({b, H, W, co}, std::move(out), {nx, nw, nb}, bwd);
}

/// 2x2 average pooling with stride 2; spatial extents must be even.
template <typename T>
Tensor<T> avgpool2x2_nhwc(const Tensor<T>& x) {
  auto nx = x.node();
  if (nx->shape.size() != 4) throw ShapeError("avgpool2x2: input must be [b,H,W,C]");
  int64_t b = nx->shape[0], H = nx->shape[1], W = nx->shape[2], c = nx->shape[3];
  if (H % 2 || W % 2) throw ShapeError("avgpool2x2: H and W must be even");
  int64_t oh = H / 2, ow = W / 2;
  Buffer<T> out(b * oh * ow * c);
  const T* xp = nx->value.data();
  for (int64_t ib = 0; ib < b; ++ib)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t xx = 0; xx < ow; ++xx) {
        T* op = out.data() + ((ib * oh + y) * ow + xx) * c;
        const T* p00 = xp + ((ib * H + 2 * y) * W + 2 * xx) * c;
        const T* p01 = p00 + c;
        const T* p10 = p00 + W * c;
        const T* p11 = p10 + c;
        for (int64_t ch = 0; ch < c; ++ch)
          op[ch] = (p00[ch] + p01[ch] + p10[ch] + p11[ch]) * T(0.25);
      }
  auto bwd = [nx, b, H, W, c, oh, ow](typename Tensor<T>::Node& self) {
    auto& gx = nx->ensure_grad();
    for (int64_t ib = 0; ib < b; ++ib)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t xx = 0; xx < ow; ++xx) {
          const T* gp = self.grad.data() + ((ib * oh + y) * ow + xx) * c;
          T* p00 = gx.data() + ((ib * H + 2 * y) * W + 2 * xx) * c;
          T* p01 = p00 + c;
          T* p10 = p00 + W * c;
          T* p11 = p10 + c;
          for (int64_t ch = 0; ch < c; ++ch) {
            T g = gp[ch] * T(0.25);
            p00[ch] += g;
            p01[ch] += g;
            p10[ch] += g;
            p11[ch] += g;
          }
        }
  };
  return detail::make_result<T>({b, oh, ow, c}, std::move(out), {nx}, bwd);
}

/// Euclidean distance between two same-shape tensors (scalar result).
/// The subgradient at coincident points is the zero vector.
template <typename T>
Tensor<T> l2_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("l2_distance: shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<T> d = sub(a, b);
  return sqrt0(sum_all(mul(d, d)));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Gradients of leaves accumulate
/// across calls; interior nodes are re-seeded each time.
template <typename T>
void backward(const Tensor<T>& loss) {
  using Node = typename Tensor<T>::Node;
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // detached from every trainable leaf

  // iterative post-order DFS -> topological order
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  loss.node()->ensure_grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

/// Max over coordinates of |analytic - central difference| / max(1, |central|).
/// f must be a pure scalar-valued function of its tensor argument.
template <typename T, typename F>
T grad_check(F&& f, const Tensor<T>& x0, T h) {
  Tensor<T> x = x0.clone(true);
  Tensor<T> loss = f(x);
  if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
  backward(loss);
  Buffer<T> analytic = x.grad();

  T max_err = T(0);
  Tensor<T> probe = x0.clone(false);
  for (int64_t i = 0; i < probe.numel(); ++i) {
    T saved = probe.value()[i];
    probe.value()[i] = saved + h;
    T fp = f(probe).item();
    probe.value()[i] = saved - h;
    T fm = f(probe).item();
    probe.value()[i] = saved;
    T numeric = (fp - fm) / (T(2) * h);
    T err = std::abs(analytic[i] - numeric) / std::max(T(1), std::abs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace mlkd
