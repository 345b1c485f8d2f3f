#pragma once

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "qbc/calibration.hpp"
#include "qbc/container.hpp"
#include "qbc/model.hpp"

namespace qbc {

struct ModelWriteOptions {
  // Store bias vectors as f32. Lossy; the file records it and reports read
  // from such models show bias_precision "f32".
  bool f32_biases = false;
};

Container model_to_container(const QuantizedModel& model, const ModelWriteOptions& options = {});
QuantizedModel model_from_container(const Container& c);
// Float-only model file, as written by `gen`.
Container spec_to_container(const ModelSpec& spec);
// Accepts float-only and quantized model files.
ModelSpec spec_from_container(const Container& c);

void write_model(const std::filesystem::path& path, const QuantizedModel& model,
                 const ModelWriteOptions& options = {});
QuantizedModel read_model(const std::filesystem::path& path);
void write_model_spec(const std::filesystem::path& path, const ModelSpec& spec);
ModelSpec read_model_spec(const std::filesystem::path& path);
// True when the file holds quantizer state (as opposed to a float spec).
bool is_quantized_model_file(const Container& c);
// "f32" when the file's biases were exported lossily, else "f64".
std::string bias_precision(const Container& c);

void write_batch(const std::filesystem::path& path, const CalibrationBatch& batch);
CalibrationBatch read_batch(const std::filesystem::path& path);

nlohmann::json config_to_json(const QuantConfig& cfg);
QuantConfig config_from_json(const nlohmann::json& j);

nlohmann::json report_to_json(const std::vector<ErrorReport>& reports);
void write_report(const std::filesystem::path& path, const std::vector<ErrorReport>& reports);
// site_index,site_name,base_error,compensated_error
void write_error_csv(const std::filesystem::path& path, const ErrorReport& report);
// site_index,site_name,length,mean,abs_mean,variance
void write_bias_csv(const std::filesystem::path& path, const std::vector<BiasStatistics>& stats);

}  // namespace qbc
