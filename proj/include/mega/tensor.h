#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "mega/error.h"

namespace mega {

using Shape = std::vector<std::size_t>;

enum class Dtype { f64, f32 };

std::string to_string(const Shape& shape);
std::string to_string(Dtype dtype);

// Dense row-major array of reals. Storage is always double; an f32 tag means
// every stored value is representable as a float (see cast()).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor vector(std::vector<double> values);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  Dtype dtype() const { return dtype_; }

  // Matrix view helpers. A rank-1 tensor behaves as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t i);
  std::span<const double> row(std::size_t i) const;

  Tensor reshaped(Shape shape) const;
  Tensor cast(Dtype dtype) const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  void fill(double value);
  Tensor& operator+=(const Tensor& other);

  // Bitwise equality of shape and payload.
  bool identical(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  Dtype dtype_ = Dtype::f64;
};

std::size_t element_count(const Shape& shape);

// Throws NumericalError naming `where` if any value is NaN or infinite.
void check_finite(const Tensor& t, const std::string& where);

double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);

}  // namespace mega
