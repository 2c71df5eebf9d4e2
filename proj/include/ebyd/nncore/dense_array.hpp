#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ebyd {

using Dims = std::vector<std::size_t>;

std::size_t dims_product(const Dims& dims);
std::string format_dims(const Dims& dims);

// Row-major n-dimensional array of 32-bit reals. Every dimension is
// positive and the flat storage always holds exactly product(dims) values.
class DenseArray {
 public:
  DenseArray() = default;
  explicit DenseArray(Dims dims, float fill = 0.0f);
  DenseArray(Dims dims, std::vector<float> values);

  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<float> values() { return values_; }
  std::span<const float> values() const { return values_; }
  float* data() { return values_.data(); }
  const float* data() const { return values_.data(); }

  float& operator[](std::size_t i) { return values_[i]; }
  float operator[](std::size_t i) const { return values_[i]; }

  // Same storage, new dims with identical element count.
  DenseArray reshaped(Dims dims) const;
  bool same_shape(const DenseArray& other) const { return dims_ == other.dims_; }
  bool all_finite() const;
  void fill(float value);

  // Bitwise comparison of dims and storage.
  bool bitwise_equal(const DenseArray& other) const;

 private:
  Dims dims_;
  std::vector<float> values_;
};

}  // namespace ebyd
