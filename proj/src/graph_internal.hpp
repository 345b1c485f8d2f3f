#pragma once

#include <cstddef>

#include "qbc/model.hpp"

namespace qbc::detail {

// Hooks the shared graph walker calls at every quantized site. The walker
// owns the float parts (float biases, layernorm, softmax, GELU, residuals).
class SiteExecutor {
 public:
  virtual ~SiteExecutor() = default;
  // x is [b, m] or [b, s, m]; w is the float weight of the site.
  virtual Tensor linear(std::size_t site, const Tensor& x, const Tensor& w) = 0;
  // Both operands [b*h, s, k] x [b*h, k, t].
  virtual Tensor bmm(std::size_t site, const Tensor& a, const Tensor& c) = 0;
  // Called with the site output shaped [b, ...]; may modify it in place.
  virtual void finish(std::size_t site, Tensor& output) = 0;
};

Tensor run_graph(const ModelSpec& spec, const Tensor& input, SiteExecutor& executor);

}  // namespace qbc::detail
