#pragma once

#include <cstddef>
#include <string>

#include "qbc/tensor.hpp"

namespace qbc {

// Vector added to every batch row of one quantized site's output. Its length
// is the product of the site's non-batch output axes (sequence x feature for
// rank-3 outputs).
struct BiasVector {
  Tensor values;  // [n]
  std::string site_id;
  std::size_t batch_size_used = 0;

  std::size_t size() const noexcept { return values.numel(); }
  void validate() const;
};

struct OutputErrorRecord {
  std::string site_id;
  double base_error = 0.0;         // ||N||^2
  double compensated_error = 0.0;  // sum_j ||N(j) - B*||^2
  double reduction_term = 0.0;     // b ||B*||^2
  std::size_t b = 0;
};

// X_float - X_quant flattened to [b, n].
Tensor output_diff(const Tensor& x_float, const Tensor& x_quant);

// ||N||_F^2 of a [b, n] difference matrix.
double output_error(const Tensor& diff);

// Column means of the difference matrix. This is the unique minimizer of
// compensated_error over all bias vectors.
BiasVector optimal_bias(const Tensor& diff, std::string site_id = {});

// sum_j ||N(j) - v||^2
double compensated_error(const Tensor& diff, const Tensor& bias);
double compensated_error(const Tensor& diff, const BiasVector& bias);

// Gradient of compensated_error with respect to the bias: 2 (b v - sum_j N(j)).
Tensor compensated_error_gradient(const Tensor& diff, const Tensor& bias);

// Splits ||N||^2 into the error left after optimal compensation and the
// amount it removes, b ||mean_j N(j)||^2. The two parts are computed
// independently so the identity can be checked.
OutputErrorRecord guarantee_decomposition(const Tensor& diff, std::string site_id = {});

// [n, n] matrix with b on the diagonal and zeros elsewhere. This is the
// Hessian of compensated_error / 2; the Hessian of compensated_error itself
// is 2b on the diagonal. Both are positive definite for b >= 1.
Tensor hessian(std::size_t n_features, std::size_t b);

struct DescentOptions {
  std::size_t max_steps = 100000;
  double learning_rate = 0.0;  // must be < 1/b for convergence
  double tolerance = 1e-12;    // stop when the largest update is below this
};

// Plain gradient descent on compensated_error starting from zero. Used as an
// independent check of optimal_bias; throws InstabilityError if the error
// ever increases between iterations.
BiasVector gradient_descent_oracle(const Tensor& diff, const DescentOptions& options);

// Adds the bias to every batch row of a site output of any rank.
Tensor apply_bias(const Tensor& x_quant, const BiasVector& bias);

}  // namespace qbc
