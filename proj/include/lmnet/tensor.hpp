#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lmnet/errors.hpp"

namespace lmnet {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Element count of a shape; throws SizeError when the product overflows.
inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e != 0 && n > std::numeric_limits<std::size_t>::max() / e) {
      throw SizeError("tensor extent product overflows: " + shape_string(shape));
    }
    n *= e;
  }
  return n;
}

/// Dense row-major array. Feature maps use N,C,H,W ordering, token
/// sequences use [N, tokens, C]. The scalar type is float for runtime and
/// double for gradient checks.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("buffer of " + std::to_string(data_.size()) + " elements does not match shape " +
                       shape_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
    }
    return shape_[axis];
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // index(n,c,h,w) = ((n*C + c)*H + h)*W + w
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw ShapeError("index rank " + std::to_string(idx.size()) + " does not match shape " + shape_string(shape_));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) throw ShapeError("index out of bounds on axis " + std::to_string(axis));
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  template <class... I>
  T& at(I... i) {
    return data_[offset({static_cast<std::size_t>(i)...})];
  }
  template <class... I>
  const T& at(I... i) const {
    return data_[offset({static_cast<std::size_t>(i)...})];
  }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  Tensor reshape(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* src = a.ptr();
  T* dst = out.ptr();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f, const char* what) {
  require_same_shape(a.shape(), b.shape(), what);
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* dst = out.ptr();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(pa[i], pb[i]);
  return out;
}

}  // namespace detail

// Elementwise algebra. Binary ops require identical shapes; the only
// broadcasting is tensor-with-scalar.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, [](T x, T y) { return x + y; }, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, [](T x, T y) { return x - y; }, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, [](T x, T y) { return x * y; }, "mul");
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, [](T x, T y) { return x / y; }, "div");
}
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::map(a, [s](T x) { return x + s; });
}
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return detail::map(a, [s](T x) { return x * s; });
}
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::map(a, [](T x) { return x > T{0} ? x : T{0}; });
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::map(a, [](T x) { return T{1} / (T{1} + std::exp(-x)); });
}
template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::map(a, [](T x) { return std::exp(x); });
}
template <class T>
Tensor<T> ln(const Tensor<T>& a) {
  return detail::map(a, [](T x) { return std::log(x); });
}

// In-place accumulate, used by gradient rules.
template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  detail::require_same_shape(dst.shape(), src.shape(), "add_into");
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

/// C = A·B for A[m,k], B[k,n]. Each output is summed over k left to right
/// starting from zero, so results are reproducible bit for bit.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* pc = out.ptr();
  // i-p-j ordering still adds the p-th term into each c[i,j] in increasing p.
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return out;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d expects rank 2, got " + shape_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

/// Materializes a contiguous copy with axes reordered: out.shape[i] =
/// in.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch");
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[perm[i]];
  Tensor<T> out(out_shape);
  if (out.empty()) return out;

  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape()[i];
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t lin = 0; lin < out.size(); ++lin) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
    out[lin] = a[src];
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

namespace detail {

// Splits a shape around `axis` into (outer, extent, inner) products.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

template <class T>
Tensor<T> concat(const std::vector<const Tensor<T>*>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& ref = parts.front()->shape();
  if (axis >= ref.size()) throw ShapeError("concat axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor<T>* p : parts) {
    if (p->rank() != ref.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p->shape()[i] != ref[i]) {
        throw ShapeError("concat extent mismatch " + shape_string(p->shape()) + " vs " + shape_string(ref));
      }
    }
    out_shape[axis] += p->shape()[axis];
  }
  Tensor<T> out(out_shape);
  std::size_t outer, inner;
  detail::split_axis(out_shape, axis, outer, inner);
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const Tensor<T>* p : parts) {
    const std::size_t row = p->shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p->ptr() + o * row, row, out.ptr() + o * out_row + offset);
    }
    offset += row;
  }
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  return concat(ptrs, axis);
}

/// Half-open range [begin, end) along one axis.
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank()) throw ShapeError("slice axis out of range");
  if (begin > end || end > a.shape()[axis]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for extent " +
                     std::to_string(a.shape()[axis]));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  Tensor<T> out(out_shape);
  std::size_t outer, inner;
  detail::split_axis(a.shape(), axis, outer, inner);
  const std::size_t in_row = a.shape()[axis] * inner;
  const std::size_t out_row = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.ptr() + o * in_row + begin * inner, out_row, out.ptr() + o * out_row);
  }
  return out;
}

template <class T>
T sum_all(const Tensor<T>& a) {
  T s{0};
  for (T v : a.data()) s += v;
  return s;
}

}  // namespace lmnet
