#include "qbc/rng.hpp"

#include <cmath>
#include <numbers>

#include "qbc/errors.hpp"

namespace qbc {

double RngStream::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw ArgumentError("RngStream::below(0)");
  // Rejection sampling keeps the result unbiased.
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(theta);
  has_spare_ = true;
  return radius * std::cos(theta);
}

Tensor RngStream::uniform_tensor(Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = uniform(lo, hi);
  return t;
}

Tensor RngStream::normal_tensor(Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = stddev * normal();
  return t;
}

}  // namespace qbc
