#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace qbc {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major tensor of doubles with one to three axes. Conventional
// layouts are [batch], [batch, feature] and [batch, sequence, feature].
class Tensor {
 public:
  Tensor() = default;
  // Zero-filled.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  // Same as the (shape, data) constructor but also rejects NaN/Inf; use it
  // for anything that crosses an API or file boundary.
  static Tensor from_external(Shape shape, std::vector<double> data);
  // Row-wise literal, mostly for tests: Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> mutable_data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const;
  double at(std::size_t i, std::size_t j, std::size_t k) const;

  // Same data, new shape with the same element count.
  Tensor reshaped(Shape shape) const;
  // View as [shape[0], product of the remaining axes]. Rank-1 tensors become
  // [1, n].
  Tensor flattened_rows() const;

  bool all_finite() const noexcept;
  // Bitwise equality of shape and every element.
  bool identical(const Tensor& other) const noexcept;

 private:
  Shape shape_;
  std::vector<double> data_;
};

Tensor matmul(const Tensor& a, const Tensor& w);
Tensor batched_matmul(const Tensor& a, const Tensor& c);
// matmul for [b, m] or [b, s, m] inputs, contracting the last axis.
Tensor matmul_last_axis(const Tensor& x, const Tensor& w);
// Swap the last two axes of a rank-3 tensor.
Tensor transpose_last(const Tensor& t);

Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& t, double factor);

// Mean over the batch (first) axis of a [b, n] tensor; returns [n].
Tensor row_mean(const Tensor& t);
// Column sums over the batch axis of a [b, n] tensor; returns [n].
Tensor row_sum(const Tensor& t);
double frobenius_sq(const Tensor& t);
// Adds v ([n]) to every row of t ([b, n]).
Tensor add_bias_rows(const Tensor& t, const Tensor& v);

double max_abs(const Tensor& t);

}  // namespace qbc
