#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msr/prng.hpp"

namespace msr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor (last axis contiguous) with value semantics.
///
/// The shape is fixed at construction; reshape() returns a new tensor. A
/// rank-0 tensor holds a single scalar.
template <typename T = double>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(1, T{}) {}

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_numel(shape_)) {
      throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw std::out_of_range("Tensor::dim: axis " + std::to_string(axis) + " out of range for " +
                              shape_str(shape_));
    }
    return shape_[axis];
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Flat offset of a multi-index (row-major).
  template <typename... Idx>
  std::size_t offset(Idx... idx) const {
    const std::size_t ix[] = {static_cast<std::size_t>(idx)...};
    std::size_t off = 0;
    for (std::size_t a = 0; a < sizeof...(Idx); ++a) off = off * shape_[a] + ix[a];
    return off;
  }
  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset(idx...)];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[offset(idx...)];
  }

  Tensor reshape(Shape new_shape) const {
    if (shape_numel(new_shape) != data_.size()) {
      throw std::invalid_argument("Tensor::reshape: cannot reshape " + shape_str(shape_) + " to " +
                                  shape_str(new_shape));
    }
    return Tensor(std::move(new_shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : shape_) {
      if (d == 0) throw std::invalid_argument("Tensor: zero-sized dimension in " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f) {
  require_same_shape(a, b, name);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out = a;
  for (auto& v : out.data()) v = f(v);
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "add", std::plus<T>{});
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "sub", std::minus<T>{});
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "mul", std::multiplies<T>{});
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, "div", std::divides<T>{});
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) {
  return detail::map(a, [s](T v) { return v + s; });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, T s) {
  return detail::map(a, [s](T v) { return v - s; });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) {
  return detail::map(a, [s](T v) { return v * s; });
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, T s) {
  return detail::map(a, [s](T v) { return v / s; });
}
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return mul(a, s);
}

/// y += alpha * x, in place.
template <typename T>
void axpy(T alpha, const Tensor<T>& x, Tensor<T>& y) {
  detail::require_same_shape(x, y, "axpy");
  const T* xs = x.raw();
  T* ys = y.raw();
  for (std::size_t i = 0; i < x.size(); ++i) ys[i] += alpha * xs[i];
}

template <typename T>
T sum(const Tensor<T>& a) {
  T s{};
  for (auto v : a.data()) s += v;
  return s;
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "dot");
  T s{};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Euclidean magnitude sqrt(sum a_i^2).
template <typename T>
T l2_norm(std::span<const T> a) {
  T s{};
  for (auto v : a) s += v * v;
  return std::sqrt(s);
}
template <typename T>
T l2_norm(const Tensor<T>& a) {
  return l2_norm<T>(a.data());
}

template <typename T>
T max_abs(const Tensor<T>& a) {
  T m{};
  for (auto v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

/// Mean over the given axes. Reduced axes are kept with size 1 so the result
/// broadcasts back against the input. An empty axis set returns a copy.
template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  if (axes.empty()) return a;
  std::vector<bool> reduced(a.rank(), false);
  for (auto ax : axes) {
    if (ax >= a.rank()) {
      throw std::invalid_argument("reduce_mean: axis " + std::to_string(ax) +
                                  " invalid for shape " + shape_str(a.shape()));
    }
    reduced[ax] = true;
  }
  Shape out_shape = a.shape();
  std::size_t count = 1;
  for (std::size_t ax = 0; ax < a.rank(); ++ax) {
    if (reduced[ax]) {
      count *= out_shape[ax];
      out_shape[ax] = 1;
    }
  }
  Tensor<T> out(out_shape);
  // Walk the input in order, mapping each element to its output slot.
  std::vector<std::size_t> idx(a.rank(), 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::size_t o = 0;
    for (std::size_t ax = 0; ax < a.rank(); ++ax) o = o * out_shape[ax] + (reduced[ax] ? 0 : idx[ax]);
    out[o] += a[i];
    for (std::size_t ax = a.rank(); ax-- > 0;) {
      if (++idx[ax] < a.shape()[ax]) break;
      idx[ax] = 0;
    }
  }
  for (auto& v : out.data()) v /= static_cast<T>(count);
  return out;
}

/// a - m where m has the rank of a and each dim either equal or 1.
template <typename T>
Tensor<T> broadcast_sub(const Tensor<T>& a, const Tensor<T>& m) {
  if (m.rank() != a.rank()) {
    throw std::invalid_argument("broadcast_sub: rank mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(m.shape()));
  }
  for (std::size_t ax = 0; ax < a.rank(); ++ax) {
    if (m.shape()[ax] != 1 && m.shape()[ax] != a.shape()[ax]) {
      throw std::invalid_argument("broadcast_sub: cannot broadcast " + shape_str(m.shape()) +
                                  " to " + shape_str(a.shape()));
    }
  }
  Tensor<T> out(a.shape());
  std::vector<std::size_t> idx(a.rank(), 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::size_t o = 0;
    for (std::size_t ax = 0; ax < a.rank(); ++ax) {
      o = o * m.shape()[ax] + (m.shape()[ax] == 1 ? 0 : idx[ax]);
    }
    out[i] = a[i] - m[o];
    for (std::size_t ax = a.rank(); ax-- > 0;) {
      if (++idx[ax] < a.shape()[ax]) break;
      idx[ax] = 0;
    }
  }
  return out;
}

/// Tensor with i.i.d. U[lo, hi) entries drawn in row-major order.
template <typename T = double>
Tensor<T> uniform_tensor(Prng& rng, const Shape& shape, T lo, T hi) {
  if (!(lo < hi)) {
    throw std::invalid_argument("uniform_tensor: lo must be < hi");
  }
  Tensor<T> out(shape);
  for (auto& v : out.data()) {
    v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    if (v >= hi) v = std::nextafter(hi, lo);  // narrowing to float can round up
  }
  return out;
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace msr
