#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qbc/model.hpp"
#include "qbc/rng.hpp"

namespace qbc {

// Parsed form of "transformer:blocks=2,d=32,heads=4,ff=64,seq=16" or
// "mlp:784-256-64".
struct ArchDescriptor {
  enum class Kind { kMlp, kTransformer } kind = Kind::kMlp;
  std::vector<std::size_t> mlp_dims;
  std::size_t blocks = 1, d_model = 32, n_heads = 4, d_ff = 64, seq = 16;

  static ArchDescriptor parse(const std::string& text);
  std::string to_string() const;
};

// Gaussian weights scaled by 1/sqrt(fan_in), small float biases, unit
// layernorm gains. MLP hidden layers use GELU.
ModelSpec make_toy_model(const ArchDescriptor& arch, RngStream& rng);
// Standard-normal inputs shaped for the architecture.
CalibrationBatch make_toy_batch(const ArchDescriptor& arch, std::size_t batch_size,
                                RngStream& rng);

}  // namespace qbc
