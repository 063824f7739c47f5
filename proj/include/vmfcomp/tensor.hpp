#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "vmfcomp/errors.hpp"

namespace vmfcomp {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major tensor with value semantics. Layout for images/features is
// NCHW throughout.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
  Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if ((int64_t)data_.size() != shape_numel(shape_))
      throw ShapeMismatch("tensor data size does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool empty() const { return data_.empty(); }
  int64_t numel() const { return (int64_t)data_.size(); }
  const Shape& shape() const { return shape_; }
  int ndim() const { return (int)shape_.size(); }
  int64_t dim(int i) const { return shape_[(size_t)i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[(size_t)i]; }
  const T& operator[](int64_t i) const { return data_[(size_t)i]; }

  // NCHW accessors
  T& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[(size_t)(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[(size_t)(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  T& at2(int64_t i, int64_t j) { return data_[(size_t)(i * shape_[1] + j)]; }
  const T& at2(int64_t i, int64_t j) const { return data_[(size_t)(i * shape_[1] + j)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Reinterpret the buffer with a new shape of equal element count.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw ShapeMismatch("reshape " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor out;
    out.shape_ = std::move(s);
    out.data_ = data_;
    return out;
  }

  T item() const {
    if (numel() != 1) throw ShapeMismatch("item() on tensor " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite((double)v)) return false;
    return true;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T, class U>
Tensor<T> cast_tensor(const Tensor<U>& in) {
  Tensor<T> out(in.shape());
  for (int64_t i = 0; i < in.numel(); ++i) out[i] = (T)in[i];
  return out;
}

}  // namespace vmfcomp
