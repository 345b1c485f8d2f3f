#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qbc/tensor.hpp"

namespace qbc {

enum class Scheme { kSymmetric, kAsymmetric };
enum class Granularity { kPerTensor, kPerChannel, kPerGroup };

std::string to_string(Scheme scheme);
std::string to_string(Granularity granularity);
Scheme parse_scheme(const std::string& text);
Granularity parse_granularity(const std::string& text);

// Uniform round-to-nearest quantizer parameters. Rounding is always
// ties-to-even.
struct QuantConfig {
  int bits = 8;
  Scheme scheme = Scheme::kSymmetric;
  Granularity granularity = Granularity::kPerTensor;
  std::size_t axis = 0;         // per-channel only
  std::size_t group_size = 64;  // per-group only, along the last axis

  static QuantConfig per_tensor(int bits, Scheme scheme = Scheme::kSymmetric);
  static QuantConfig per_channel(int bits, std::size_t axis, Scheme scheme = Scheme::kSymmetric);
  static QuantConfig per_group(int bits, std::size_t group_size,
                               Scheme scheme = Scheme::kSymmetric);

  // Symmetric: [-(2^(bits-1) - 1), 2^(bits-1) - 1]. Asymmetric: [0, 2^bits - 1].
  std::int32_t code_min() const;
  std::int32_t code_max() const;

  void validate() const;
  void validate_for(const Shape& shape) const;
  // Number of independent (scale, zero point) units for a tensor of `shape`.
  std::size_t unit_count(const Shape& shape) const;
  std::string describe() const;

  bool operator==(const QuantConfig&) const = default;
};

struct QuantizedTensor {
  Shape shape;
  QuantConfig config;
  std::vector<std::int32_t> codes;
  std::vector<double> scales;             // one per unit
  std::vector<std::int32_t> zero_points;  // one per unit, asymmetric only

  // Unit owning flat element `index`.
  std::size_t unit_of(std::size_t index) const;
  // Throws ValidationError naming the offending field.
  void validate() const;
};

double round_ties_even(double x);

QuantizedTensor quantize(const Tensor& t, const QuantConfig& cfg);
Tensor dequantize(const QuantizedTensor& q);
// dequantize(quantize(t, cfg))
Tensor fake_quantize(const Tensor& t, const QuantConfig& cfg);

// Q(x) Q(w), or x Q(w) when cfg_x is empty (weight-only mode). x may be
// [b, m] or [b, s, m]; rank-3 inputs are multiplied along the last axis.
Tensor quant_matmul(const Tensor& x, const Tensor& w, const std::optional<QuantConfig>& cfg_x,
                    const QuantConfig& cfg_w);

struct NoiseMatrices {
  Tensor input;   // X - Q(X); zero in weight-only mode
  Tensor weight;  // W - Q(W)
};

NoiseMatrices noise_matrices(const Tensor& x, const Tensor& w,
                             const std::optional<QuantConfig>& cfg_x, const QuantConfig& cfg_w);

}  // namespace qbc
