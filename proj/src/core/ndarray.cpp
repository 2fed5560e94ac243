#include "contextflow/core/ndarray.hpp"

#include <cmath>
#include <sstream>

#include "contextflow/core/error.hpp"

namespace contextflow {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

NdArray::NdArray(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ConfigError("NdArray: shape " + shape_str(shape_) + " does not match data size " +
                      std::to_string(data_.size()));
  }
}

NdArray NdArray::scalar(double v) {
  NdArray a;
  a.data_[0] = v;
  return a;
}

NdArray NdArray::full(Shape shape, double v) {
  NdArray a(std::move(shape));
  for (double& x : a.data_) x = v;
  return a;
}

NdArray NdArray::arange(std::size_t n) {
  NdArray a(Shape{n});
  for (std::size_t i = 0; i < n; ++i) a.data_[i] = static_cast<double>(i);
  return a;
}

NdArray NdArray::eye(std::size_t n) {
  NdArray a(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) a.data_[i * n + i] = 1.0;
  return a;
}

NdArray NdArray::uniform(Shape shape, Rng& rng) {
  NdArray a(std::move(shape));
  for (double& x : a.data_) x = rng.uniform();
  return a;
}

NdArray NdArray::normal(Shape shape, Rng& rng, double stddev) {
  NdArray a(std::move(shape));
  for (double& x : a.data_) x = stddev * rng.normal();
  return a;
}

std::size_t NdArray::offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) {
    throw ConfigError("NdArray::at: rank mismatch");
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

bool NdArray::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

double NdArray::item() const {
  if (data_.size() != 1) {
    throw ConfigError("NdArray::item: array has " + std::to_string(data_.size()) + " elements");
  }
  return data_[0];
}

NdArray NdArray::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != data_.size()) {
    throw ConfigError("NdArray::reshaped: " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                      " changes element count");
  }
  return NdArray(std::move(new_shape), data_);
}

}  // namespace contextflow
