#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace eptq {

// Dense n-dimensional tensor of doubles, row-major.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor full(std::vector<std::size_t> shape, double value);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Throws if any element is NaN or Inf. Used at model/input boundaries.
  void require_finite(const std::string& what) const;

  Tensor reshaped(std::vector<std::size_t> new_shape) const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_to_string(const std::vector<std::size_t>& shape);

// Elementwise helpers used across modules.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double k);
double dot(const Tensor& a, const Tensor& b);
double sum_squares(const Tensor& a);
double max_abs(const Tensor& a);

// Rounds half away from zero, matching the quantizer contract exactly.
inline double round_half_away(double x) {
  return (x >= 0.0) ? std::floor(x + 0.5) : std::ceil(x - 0.5);
}

}  // namespace eptq
