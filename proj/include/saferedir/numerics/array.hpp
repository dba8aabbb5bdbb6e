#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "saferedir/errors.hpp"

namespace saferedir {

using Shape = std::vector<std::size_t>;

/// Guard added wherever a norm appears in a denominator.
inline constexpr double kNormEps = 1e-8;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. The scalar type selects the working precision
/// (float for training and inference, double for gradient checks).
template <class T>
class Array {
 public:
  using value_type = T;

  Array() = default;
  explicit Array(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw DimensionError("array data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_str(shape_));
  }

  static Array from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    Array out;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    out.shape_ = {rows.size(), cols};
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged rows");
      out.data_.insert(out.data_.end(), r.begin(), r.end());
    }
    return out;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  Array reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Array(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Array<U> cast() const {
    return Array<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Array& a, const Array& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

namespace detail {

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n, std::size_t& inner) {
  if (axis >= s.size()) throw DomainError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  n = s[axis];
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

}  // namespace detail

/// out[M×N] = a[M×K] · b[K×N]. GEMM is delegated to Eigen.
template <class T>
Array<T> matmul(const Array<T>& a, const Array<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Array<T> out({a.dim(0), b.dim(1)});
  MatMap<T>(out.data(), m, n).noalias() = ConstMatMap<T>(a.data(), m, k) * ConstMatMap<T>(b.data(), k, n);
  return out;
}

template <class T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
T silu(T x) {
  return x * sigmoid(x);
}

template <class T>
Array<T> sigmoid(const Array<T>& x) {
  Array<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

template <class T>
Array<T> silu(const Array<T>& x) {
  Array<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = silu(x[i]);
  return out;
}

/// Max-subtracted softmax along `axis`.
template <class T>
Array<T> softmax(const Array<T>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner);
  Array<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      T sum = 0;
      for (std::size_t j = 0; j < n; ++j) sum += (out[base + j * inner] = std::exp(x[base + j * inner] - mx));
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= sum;
    }
  return out;
}

/// Normalizes every slice along `axis` to mean 0 / variance 1, then applies
/// gain and bias (each of length dim(axis); pass empty arrays to skip).
template <class T>
Array<T> layer_norm(const Array<T>& x, const Array<T>& gain, const Array<T>& bias, std::size_t axis,
                    T eps = T(1e-5)) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner);
  if ((!gain.empty() && gain.size() != n) || (!bias.empty() && bias.size() != n))
    throw DimensionError("layer_norm: gain/bias length must be " + std::to_string(n));
  Array<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mean = 0;
      for (std::size_t j = 0; j < n; ++j) mean += x[base + j * inner];
      mean /= T(n);
      T var = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T d = x[base + j * inner] - mean;
        var += d * d;
      }
      var /= T(n);
      const T inv = T{1} / std::sqrt(var + eps);
      for (std::size_t j = 0; j < n; ++j) {
        T v = (x[base + j * inner] - mean) * inv;
        if (!gain.empty()) v *= gain[j];
        if (!bias.empty()) v += bias[j];
        out[base + j * inner] = v;
      }
    }
  return out;
}

/// Euclidean norm along `axis`; the axis is removed from the shape.
template <class T>
Array<T> l2_norm(const Array<T>& x, std::size_t axis) {
  std::size_t outer, n, inner;
  detail::split_axis(x.shape(), axis, outer, n, inner);
  Array<T> out(detail::drop_axis(x.shape(), axis));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T v = x[o * n * inner + j * inner + in];
        s += v * v;
      }
      out[o * inner + in] = std::sqrt(s);
    }
  return out;
}

/// Cosine similarity along `axis`. A zero-norm operand yields 0.
template <class T>
Array<T> cosine_sim(const Array<T>& a, const Array<T>& b, std::size_t axis) {
  if (a.shape() != b.shape())
    throw DimensionError("cosine_sim: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::size_t outer, n, inner;
  detail::split_axis(a.shape(), axis, outer, n, inner);
  Array<T> out(detail::drop_axis(a.shape(), axis));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      T dot = 0, na = 0, nb = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t i = o * n * inner + j * inner + in;
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
      }
      na = std::sqrt(na);
      nb = std::sqrt(nb);
      T c = 0;
      if (na > T(kNormEps) && nb > T(kNormEps)) c = std::clamp(dot / (na * nb), T{-1}, T{1});
      out[o * inner + in] = c;
    }
  return out;
}

/// Cosine of two flat vectors (zero-norm guard as above).
template <class T>
T cosine(std::span<const T> a, std::span<const T> b) {
  T dot = 0, na = 0, nb = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na <= T(kNormEps) || nb <= T(kNormEps)) return T{0};
  return std::clamp(dot / (na * nb), T{-1}, T{1});
}

}  // namespace saferedir
