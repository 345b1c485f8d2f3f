#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "qbc/bias_compensation.hpp"
#include "qbc/quantizer.hpp"
#include "qbc/tensor.hpp"

namespace qbc {

enum class Activation { kNone, kRelu, kGelu };

std::string to_string(Activation activation);
Activation parse_activation(const std::string& text);

struct LinearBlock {
  Tensor weight;               // [m, n]
  std::optional<Tensor> bias;  // [n]
  Activation activation = Activation::kNone;
};

// Pre-norm encoder block:
//   x += O(attention(LN1(x)));  x += FC2(GELU(FC1(LN2(x))))
// with no causal mask.
struct TransformerBlock {
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t d_ff = 0;
  Tensor wq, wk, wv, wo;  // [d, d]
  Tensor bq, bk, bv, bo;  // [d]
  Tensor w1;              // [d, ff]
  Tensor b1;              // [ff]
  Tensor w2;              // [ff, d]
  Tensor b2;              // [d]
  bool layernorm = true;
  Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // [d]
};

using Block = std::variant<LinearBlock, TransformerBlock>;

enum class SiteKind { kLinear, kBmm };

struct SiteInfo {
  std::string name;
  SiteKind kind = SiteKind::kLinear;
  std::size_t block = 0;
  std::size_t slot = 0;  // position inside a transformer block, 0..7
};

inline constexpr std::size_t kSitesPerTransformerBlock = 8;

struct ModelSpec {
  std::vector<Block> layers;

  // Quantized matmul/BMM sites in execution order. A transformer block
  // contributes q_proj, k_proj, v_proj, bmm_scores, bmm_context, o_proj, fc1,
  // fc2; a linear block contributes one site.
  std::vector<SiteInfo> sites() const;
  // Weight operand of a linear site.
  const Tensor& site_weight(const SiteInfo& site) const;
  // Feature size the first layer expects on the last input axis.
  std::size_t input_features() const;
  // Whether the first layer needs [b, s, d] input.
  bool expects_sequence() const;
  void validate() const;
};

struct CalibrationBatch {
  Tensor inputs;  // [b, m] or [b, s, d]

  std::size_t size() const { return inputs.rank() ? inputs.dim(0) : 0; }
  void validate() const;
};

enum class QuantMode { kWeightOnly, kWeightActivation };

std::string to_string(QuantMode mode);
QuantMode parse_mode(const std::string& text);

struct SiteQuantization {
  std::optional<QuantConfig> weight_config;      // linear sites
  std::optional<QuantizedTensor> weight;         // linear sites
  std::optional<QuantConfig> activation_config;  // weight+activation mode only
  std::optional<BiasVector> bias;
};

struct QuantizedModel {
  ModelSpec spec;
  QuantMode mode = QuantMode::kWeightOnly;
  std::vector<SiteQuantization> sites;  // parallel to spec.sites()
  // Sequence length the biases were calibrated for; 0 for rank-2 models or
  // when no biases are attached.
  std::size_t sequence_length = 0;

  bool has_biases() const;
  QuantizedModel without_biases() const;
  void validate() const;
};

// Quantizes every linear site's weight with `weight_config` and, in
// weight+activation mode, attaches `activation_config` to every site input
// (both operands of BMM sites). Per-channel weight configs use the output
// channel axis regardless of the axis passed in.
QuantizedModel quantize_model(const ModelSpec& spec, QuantMode mode,
                              const QuantConfig& weight_config,
                              const QuantConfig& activation_config);

struct ForwardResult {
  Tensor output;
  // Per-site outputs, only filled when recording. For quantized passes these
  // are after bias compensation and `raw_site_outputs` holds the values
  // before it.
  std::vector<Tensor> site_outputs;
  std::vector<Tensor> raw_site_outputs;
};

ForwardResult forward_float(const ModelSpec& spec, const CalibrationBatch& batch,
                            bool record = false);
ForwardResult forward_quantized(const QuantizedModel& model, const CalibrationBatch& batch,
                                bool record = false);

// Site output shape for a batch of `b` (used to size bias vectors).
std::vector<Shape> site_output_shapes(const ModelSpec& spec, const Shape& input_shape);

}  // namespace qbc
