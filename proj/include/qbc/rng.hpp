#pragma once

#include <cstdint>
#include <random>

#include "qbc/tensor.hpp"

namespace qbc {

// Seeded stream over std::mt19937_64, whose output sequence is fixed by the
// C++ standard. The distributions are implemented here rather than taken
// from <random> because the standard library's distributions are not
// portable across implementations.
class RngStream {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64";

  explicit RngStream(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Standard normal, Box-Muller. Bit-identity also depends on the platform
  // libm's log/cos/sin.
  double normal();

  Tensor uniform_tensor(Shape shape, double lo, double hi);
  Tensor normal_tensor(Shape shape, double stddev = 1.0);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace qbc
