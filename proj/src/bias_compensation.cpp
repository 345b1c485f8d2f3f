#include "qbc/bias_compensation.hpp"

#include <cmath>

#include "qbc/errors.hpp"

namespace qbc {

namespace {

void require_diff_matrix(const Tensor& diff, const char* what) {
  if (diff.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a [b, n] matrix, got " +
                         shape_to_string(diff.shape()));
  }
  if (diff.dim(0) == 0) throw ArgumentError(std::string(what) + ": empty batch");
}

void require_bias_length(const Tensor& diff, const Tensor& bias) {
  if (bias.rank() != 1 || bias.dim(0) != diff.dim(1)) {
    throw DimensionError("bias " + shape_to_string(bias.shape()) + " does not match rows of " +
                         shape_to_string(diff.shape()));
  }
}

}  // namespace

void BiasVector::validate() const {
  if (values.rank() != 1) throw ValidationError("bias values: must be rank 1");
  if (!values.all_finite()) throw ValidationError("bias values: non-finite entry");
}

Tensor output_diff(const Tensor& x_float, const Tensor& x_quant) {
  if (x_float.shape() != x_quant.shape()) {
    throw DimensionError("output_diff: shapes " + shape_to_string(x_float.shape()) + " and " +
                         shape_to_string(x_quant.shape()) + " differ");
  }
  if (x_float.dim(0) == 0) throw ArgumentError("output_diff: empty batch");
  return subtract(x_float, x_quant).flattened_rows();
}

double output_error(const Tensor& diff) {
  if (diff.rank() != 2) {
    throw DimensionError("output_error expects a [b, n] matrix, got " +
                         shape_to_string(diff.shape()));
  }
  return frobenius_sq(diff);
}

BiasVector optimal_bias(const Tensor& diff, std::string site_id) {
  require_diff_matrix(diff, "optimal_bias");
  return BiasVector{row_mean(diff), std::move(site_id), diff.dim(0)};
}

double compensated_error(const Tensor& diff, const Tensor& bias) {
  require_diff_matrix(diff, "compensated_error");
  require_bias_length(diff, bias);
  const std::size_t b = diff.dim(0), n = diff.dim(1);
  double total = 0.0;
  for (std::size_t j = 0; j < b; ++j) {
    for (std::size_t k = 0; k < n; ++k) {
      const double r = diff[j * n + k] - bias[k];
      total += r * r;
    }
  }
  return total;
}

double compensated_error(const Tensor& diff, const BiasVector& bias) {
  return compensated_error(diff, bias.values);
}

Tensor compensated_error_gradient(const Tensor& diff, const Tensor& bias) {
  require_diff_matrix(diff, "compensated_error_gradient");
  require_bias_length(diff, bias);
  const double b = static_cast<double>(diff.dim(0));
  Tensor g = row_sum(diff);
  auto gd = g.mutable_data();
  for (std::size_t k = 0; k < gd.size(); ++k) gd[k] = 2.0 * (b * bias[k] - gd[k]);
  return g;
}

OutputErrorRecord guarantee_decomposition(const Tensor& diff, std::string site_id) {
  BiasVector best = optimal_bias(diff, site_id);
  OutputErrorRecord rec;
  rec.site_id = std::move(site_id);
  rec.b = diff.dim(0);
  rec.base_error = output_error(diff);
  rec.compensated_error = compensated_error(diff, best);
  rec.reduction_term = static_cast<double>(rec.b) * frobenius_sq(best.values);
  return rec;
}

Tensor hessian(std::size_t n_features, std::size_t b) {
  if (n_features == 0) throw ArgumentError("hessian: n_features must be >= 1");
  if (b == 0) throw ArgumentError("hessian: b must be >= 1");
  Tensor h({n_features, n_features});
  for (std::size_t p = 0; p < n_features; ++p) h[p * n_features + p] = static_cast<double>(b);
  return h;
}

BiasVector gradient_descent_oracle(const Tensor& diff, const DescentOptions& options) {
  require_diff_matrix(diff, "gradient_descent_oracle");
  if (!(options.learning_rate > 0.0)) {
    throw ArgumentError("gradient_descent_oracle: learning rate must be positive");
  }
  const std::size_t n = diff.dim(1);
  Tensor v({n});
  double previous = compensated_error(diff, v);
  for (std::size_t step = 0; step < options.max_steps; ++step) {
    const Tensor grad = compensated_error_gradient(diff, v);
    double largest_update = 0.0;
    auto vd = v.mutable_data();
    for (std::size_t k = 0; k < n; ++k) {
      const double delta = options.learning_rate * grad[k];
      vd[k] -= delta;
      largest_update = std::max(largest_update, std::abs(delta));
    }
    const double current = compensated_error(diff, v);
    if (!std::isfinite(current) || current > previous * (1.0 + 1e-12) + 1e-300) {
      throw InstabilityError("gradient descent diverged with learning rate " +
                             std::to_string(options.learning_rate) + " (b = " +
                             std::to_string(diff.dim(0)) + ")");
    }
    previous = current;
    if (largest_update <= options.tolerance) break;
  }
  return BiasVector{std::move(v), {}, diff.dim(0)};
}

Tensor apply_bias(const Tensor& x_quant, const BiasVector& bias) {
  const Tensor rows = x_quant.flattened_rows();
  if (bias.values.rank() != 1 || bias.size() != rows.dim(1)) {
    throw DimensionError("bias of length " + std::to_string(bias.size()) +
                         " does not fit site output " + shape_to_string(x_quant.shape()));
  }
  return add_bias_rows(rows, bias.values).reshaped(x_quant.shape());
}

}  // namespace qbc
