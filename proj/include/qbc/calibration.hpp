#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "qbc/bias_compensation.hpp"
#include "qbc/model.hpp"

namespace qbc {

struct SiteError {
  std::size_t index = 0;
  std::string name;
  double base_error = 0.0;
  double compensated_error = 0.0;
  // base - compensated. Equals b ||B*||^2 on the calibration batch; may be
  // negative on held-out data.
  double reduction_term = 0.0;
  std::size_t b = 0;
};

struct ErrorReport {
  std::string dataset;  // "calibration" or "held-out"
  QuantMode mode = QuantMode::kWeightOnly;
  int bits = 0;
  std::string weight_quantizer;
  bool bias_compensation = false;
  std::string bias_precision = "f64";
  std::size_t b = 0;
  std::vector<SiteError> sites;
  double final_output_error = 0.0;        // with the model's biases
  double final_output_error_no_bc = 0.0;  // same model, biases stripped
  // Mean over sites with nonzero base error of (base - compensated) / base.
  double mean_reduction_ratio = 0.0;
};

struct CalibrationResult {
  QuantizedModel model;  // with biases attached
  std::vector<OutputErrorRecord> records;
  ErrorReport report;
};

// Computes one bias vector per site from a float pass and a sequential
// quantized pass. Each site's quantized output is computed from already
// compensated upstream outputs; its bias is the batch mean of the float
// reference minus that output, and is applied before moving downstream.
CalibrationResult calibrate(const QuantizedModel& model, const CalibrationBatch& batch);

// Per-site errors of `model` (biases frozen) against the float `reference`
// on `batch`.
ErrorReport evaluate(const QuantizedModel& model, const CalibrationBatch& batch,
                     const ModelSpec& reference, std::string dataset = "held-out");

struct BiasStatistics {
  std::size_t index = 0;
  std::string name;
  std::size_t length = 0;
  double mean = 0.0;
  double abs_mean = 0.0;
  double variance = 0.0;
};

// One entry per site that has a bias attached.
std::vector<BiasStatistics> bias_statistics(const QuantizedModel& model);

}  // namespace qbc
