#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "far/error.hpp"

namespace far {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  if (shape.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major array. A default-constructed tensor is empty and has no
/// shape; every other tensor has a non-empty shape of positive dimensions.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), Real(0));
  }

  Tensor(Shape shape, std::vector<Real> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor filled(Shape shape, Real value) {
    Tensor t(std::move(shape));
    for (Real& x : t.data_) x = value;
    return t;
  }

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  /// Product of all dimensions except the last.
  std::size_t rows() const { return shape_.empty() ? 0 : size() / shape_.back(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  Real* raw() { return data_.data(); }
  const Real* raw() const { return data_.data(); }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  void fill(Real value) {
    for (Real& x : data_) x = value;
  }

  bool all_finite() const {
    for (Real x : data_) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

  bool all_zero() const {
    for (Real x : data_) {
      if (x != Real(0)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<Real> data_;
};

/// A trainable unit: value, gradient accumulator and a trainable flag.
/// Frozen parameters keep an all-zero gradient.
template <typename Real>
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor<Real> value, bool trainable = true)
      : name_(std::move(name)), value_(std::move(value)), grad_(value_.shape()), trainable_(trainable) {}

  const std::string& name() const { return name_; }
  const Tensor<Real>& value() const { return value_; }
  Tensor<Real>& mutable_value() { return value_; }
  const Tensor<Real>& grad() const { return grad_; }
  Tensor<Real>& mutable_grad() { return grad_; }
  bool trainable() const { return trainable_; }
  std::size_t size() const { return value_.size(); }
  const Shape& shape() const { return value_.shape(); }

  void set_trainable(bool trainable) {
    trainable_ = trainable;
    if (!trainable_) grad_.fill(Real(0));
  }

  void zero_grad() { grad_.fill(Real(0)); }

 private:
  std::string name_;
  Tensor<Real> value_;
  Tensor<Real> grad_;
  bool trainable_ = true;
};

enum class Precision { f32, f64 };

inline const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

}  // namespace far
