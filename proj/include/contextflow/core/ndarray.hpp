#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "contextflow/core/rng.hpp"

namespace contextflow {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense n-dimensional array of 64-bit floats, row-major, contiguous.
// Rank 0 (empty shape) is a scalar with one element. Arrays are treated
// as immutable values once built; mutation is reserved for owners
// (optimizer steps, data-dependent init).
class NdArray {
 public:
  NdArray() : shape_{}, data_(1, 0.0) {}
  explicit NdArray(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
  NdArray(Shape shape, std::vector<double> data);

  static NdArray scalar(double v);
  static NdArray zeros(Shape shape) { return NdArray(std::move(shape)); }
  static NdArray full(Shape shape, double v);
  static NdArray arange(std::size_t n);
  static NdArray eye(std::size_t n);
  static NdArray uniform(Shape shape, Rng& rng);           // entries in [0,1)
  static NdArray normal(Shape shape, Rng& rng, double stddev = 1.0);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Multi-index access, slow path for tests and setup code.
  double& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  double at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }
  std::size_t offset(std::initializer_list<std::size_t> idx) const;

  bool same_shape(const NdArray& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  double item() const;  // requires numel() == 1

  // Same data, new shape (numel must match).
  NdArray reshaped(Shape new_shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace contextflow
