// Rank-4 NCHW tensor. Row-major, width fastest. Storage is the template
// scalar (float in production, double in the gradient-check harness); every
// reduction in the library accumulates in double with a fixed sequential
// order regardless of the storage type.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bss/errors.hpp"

namespace bss {

struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  friend bool operator==(const Shape4&, const Shape4&) = default;

  std::int64_t elems() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  std::int64_t plane() const { return static_cast<std::int64_t>(h) * w; }

  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + "]";
  }
};

template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;

  TensorT(int n, int c, int h, int w, T fill = T(0))
      : dims_{n, c, h, w} {
    if (n < 1 || c < 1 || h < 1 || w < 1) {
      throw ShapeError("tensor dims must all be >= 1, got " + dims_.str());
    }
    data_.assign(static_cast<std::size_t>(dims_.elems()), fill);
  }

  explicit TensorT(Shape4 d, T fill = T(0)) : TensorT(d.n, d.c, d.h, d.w, fill) {}

  TensorT(Shape4 d, std::vector<T> data) : dims_(d), data_(std::move(data)) {
    if (d.n < 1 || d.c < 1 || d.h < 1 || d.w < 1) {
      throw ShapeError("tensor dims must all be >= 1, got " + d.str());
    }
    if (static_cast<std::int64_t>(data_.size()) != d.elems()) {
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match dims " + d.str());
    }
  }

  const Shape4& dims() const { return dims_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * dims_.c + c) * dims_.h + y) * dims_.w + x;
  }

  T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  T at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T* plane_ptr(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane_ptr(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  friend bool operator==(const TensorT&, const TensorT&) = default;

 private:
  Shape4 dims_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

template <typename To, typename From>
TensorT<To> tensor_cast(const TensorT<From>& x) {
  TensorT<To> out(x.dims());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<To>(x[i]);
  }
  return out;
}

template <typename T>
void require_same_dims(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
  if (!(a.dims() == b.dims())) {
    throw ShapeError(std::string(what) + ": dims " + a.dims().str() + " vs " +
                     b.dims().str());
  }
}

// <upstream, x> in double, fixed order. The scalar loss the gradient checks
// differentiate.
template <typename T>
double dot(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_dims(a, b, "dot");
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

}  // namespace bss
