#include "ebyd/nncore/dense_array.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "ebyd/errors.hpp"

namespace ebyd {
namespace {

void check_dims(const Dims& dims) {
  if (dims.empty()) throw ShapeError("DenseArray: rank must be at least 1");
  for (auto d : dims) {
    if (d == 0) throw ShapeError("DenseArray: zero-sized dimension in " + format_dims(dims));
  }
}

}  // namespace

std::size_t dims_product(const Dims& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::string format_dims(const Dims& dims) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out << ',';
    out << dims[i];
  }
  out << ']';
  return out.str();
}

DenseArray::DenseArray(Dims dims, float fill) : dims_(std::move(dims)) {
  check_dims(dims_);
  values_.assign(dims_product(dims_), fill);
}

DenseArray::DenseArray(Dims dims, std::vector<float> values)
    : dims_(std::move(dims)), values_(std::move(values)) {
  check_dims(dims_);
  if (values_.size() != dims_product(dims_)) {
    throw ShapeError("DenseArray: " + std::to_string(values_.size()) +
                     " values do not fill dims " + format_dims(dims_));
  }
}

DenseArray DenseArray::reshaped(Dims dims) const {
  return DenseArray(std::move(dims), values_);
}

bool DenseArray::all_finite() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](float v) { return std::isfinite(v); });
}

void DenseArray::fill(float value) { std::fill(values_.begin(), values_.end(), value); }

bool DenseArray::bitwise_equal(const DenseArray& other) const {
  return dims_ == other.dims_ &&
         std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(float)) == 0;
}

}  // namespace ebyd
