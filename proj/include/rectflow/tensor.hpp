#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace rectflow {

// Dense row-major array of doubles. Rank 0 is a scalar. Every 2-D operation
// treats a rank-1 tensor of length n as a 1 x n row and a scalar as 1 x 1.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() : values_(1, 0.0) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> values() & { return values_; }
  std::span<const double> values() const& { return values_; }
  // Owning copy when called on a temporary, so range-for stays valid.
  std::vector<double> values() && { return std::move(values_); }
  const std::vector<double>& storage() const& { return values_; }
  std::vector<double> storage() && { return std::move(values_); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return values_[r * cols() + c];
  }

  // Value of a single-element tensor.
  double item() const;
  Tensor reshaped(Shape shape) const;
  Tensor row(std::size_t r) const;
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> values_;
};

std::size_t shape_product(const Tensor::Shape& shape);
std::string shape_string(const Tensor::Shape& shape);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace rectflow
