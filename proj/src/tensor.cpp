#include "qbc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "qbc/errors.hpp"

namespace qbc {

namespace {

void check_rank(const Shape& shape) {
  if (shape.empty() || shape.size() > 3) {
    throw DimensionError("tensor rank must be 1..3, got shape " + shape_to_string(shape));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + " expects a rank-" + std::to_string(rank) +
                         " tensor, got " + shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " differ");
  }
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_rank(shape_);
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_rank(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::from_external(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  if (!t.all_finite()) throw ValueError("tensor contains non-finite values");
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return data_[r * shape_[1] + c];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " +
                         shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::flattened_rows() const {
  if (shape_.size() == 1) return reshaped({1, shape_[0]});
  return reshaped({shape_[0], data_.size() / std::max<std::size_t>(shape_[0], 1)});
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool Tensor::identical(const Tensor& other) const noexcept {
  return shape_ == other.shape_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

Tensor matmul(const Tensor& a, const Tensor& w) {
  if (a.rank() != 2 || w.rank() != 2 || a.dim(1) != w.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(w.shape()));
  }
  const std::size_t b = a.dim(0), m = a.dim(1), n = w.dim(1);
  Tensor out({b, n});
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = w.data();
  // i-k-j order keeps the inner loop contiguous; the summation order for
  // each output element is still k = 0..m-1, so results are deterministic.
  for (std::size_t i = 0; i < b; ++i) {
    double* orow = o.data() + i * n;
    for (std::size_t k = 0; k < m; ++k) {
      const double xv = x[i * m + k];
      const double* wrow = y.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * wrow[j];
    }
  }
  return out;
}

Tensor batched_matmul(const Tensor& a, const Tensor& c) {
  if (a.rank() != 3 || c.rank() != 3 || a.dim(0) != c.dim(0) || a.dim(2) != c.dim(1)) {
    throw DimensionError("batched_matmul shape mismatch: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(c.shape()));
  }
  const std::size_t batch = a.dim(0), s = a.dim(1), k = a.dim(2), t = c.dim(2);
  Tensor out({batch, s, t});
  auto o = out.mutable_data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* x = a.data().data() + bi * s * k;
    const double* y = c.data().data() + bi * k * t;
    double* z = o.data() + bi * s * t;
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double xv = x[i * k + p];
        for (std::size_t j = 0; j < t; ++j) z[i * t + j] += xv * y[p * t + j];
      }
    }
  }
  return out;
}

Tensor matmul_last_axis(const Tensor& x, const Tensor& w) {
  if (x.rank() == 2) return matmul(x, w);
  if (x.rank() != 3) {
    throw DimensionError("expected a rank-2 or rank-3 input, got " + shape_to_string(x.shape()));
  }
  const std::size_t b = x.dim(0), s = x.dim(1), m = x.dim(2);
  if (w.rank() != 2 || w.dim(0) != m) {
    throw DimensionError("matmul shape mismatch: " + shape_to_string(x.shape()) + " x " +
                         shape_to_string(w.shape()));
  }
  return matmul(x.reshaped({b * s, m}), w).reshaped({b, s, w.dim(1)});
}

Tensor transpose_last(const Tensor& t) {
  require_rank(t, 3, "transpose_last");
  const std::size_t batch = t.dim(0), r = t.dim(1), c = t.dim(2);
  Tensor out({batch, c, r});
  auto o = out.mutable_data();
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) o[(bi * c + j) * r + i] = t.at(bi, i, j);
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += b[i];
  return out;
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Tensor out = a;
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= b[i];
  return out;
}

Tensor scale(const Tensor& t, double factor) {
  Tensor out = t;
  for (double& v : out.mutable_data()) v *= factor;
  return out;
}

Tensor row_sum(const Tensor& t) {
  require_rank(t, 2, "row_sum");
  const std::size_t b = t.dim(0), n = t.dim(1);
  Tensor out({n});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < n; ++j) o[j] += t[i * n + j];
  return out;
}

Tensor row_mean(const Tensor& t) {
  require_rank(t, 2, "row_mean");
  if (t.dim(0) == 0) throw ArgumentError("row_mean of an empty batch");
  Tensor out = row_sum(t);
  const double b = static_cast<double>(t.dim(0));
  for (double& v : out.mutable_data()) v /= b;
  return out;
}

double frobenius_sq(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return s;
}

Tensor add_bias_rows(const Tensor& t, const Tensor& v) {
  require_rank(t, 2, "add_bias_rows");
  if (v.rank() != 1 || v.dim(0) != t.dim(1)) {
    throw DimensionError("add_bias_rows: bias " + shape_to_string(v.shape()) +
                         " does not match rows of " + shape_to_string(t.shape()));
  }
  Tensor out = t;
  auto o = out.mutable_data();
  const std::size_t n = t.dim(1);
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] += v[j];
  return out;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace qbc
