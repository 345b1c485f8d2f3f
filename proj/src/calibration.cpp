#include "qbc/calibration.hpp"

#include <cmath>

#include "graph_internal.hpp"
#include "qbc/errors.hpp"

namespace qbc {

namespace {

class CalibratingExecutor : public detail::SiteExecutor {
 public:
  CalibratingExecutor(QuantizedModel& model, const std::vector<Tensor>& reference)
      : model_(model), reference_(reference), infos_(model.spec.sites()) {
    weights_.resize(infos_.size());
    for (std::size_t i = 0; i < infos_.size(); ++i) {
      if (infos_[i].kind == SiteKind::kLinear) weights_[i] = dequantize(*model.sites[i].weight);
    }
  }

  Tensor linear(std::size_t site, const Tensor& x, const Tensor&) override {
    return matmul_last_axis(maybe_quantize(site, x), weights_[site]);
  }
  Tensor bmm(std::size_t site, const Tensor& a, const Tensor& c) override {
    return batched_matmul(maybe_quantize(site, a), maybe_quantize(site, c));
  }
  void finish(std::size_t site, Tensor& output) override {
    const std::string& name = infos_[site].name;
    if (!output.all_finite()) throw NumericError(name + ": non-finite quantized activation");
    const Tensor diff = output_diff(reference_[site], output);
    BiasVector bias = optimal_bias(diff, name);
    OutputErrorRecord rec;
    rec.site_id = name;
    rec.b = diff.dim(0);
    rec.base_error = output_error(diff);
    rec.compensated_error = compensated_error(diff, bias);
    rec.reduction_term = static_cast<double>(rec.b) * frobenius_sq(bias.values);
    records.push_back(rec);
    output = apply_bias(output, bias);
    model_.sites[site].bias = std::move(bias);
  }

  std::vector<OutputErrorRecord> records;

 private:
  Tensor maybe_quantize(std::size_t site, const Tensor& x) const {
    const auto& cfg = model_.sites[site].activation_config;
    return cfg ? fake_quantize(x, *cfg) : x;
  }

  QuantizedModel& model_;
  const std::vector<Tensor>& reference_;
  std::vector<SiteInfo> infos_;
  std::vector<Tensor> weights_;
};

ErrorReport report_header(const QuantizedModel& model, std::string dataset, std::size_t b) {
  ErrorReport r;
  r.dataset = std::move(dataset);
  r.mode = model.mode;
  r.b = b;
  r.bias_compensation = model.has_biases();
  for (const auto& s : model.sites) {
    if (s.weight_config) {
      r.bits = s.weight_config->bits;
      r.weight_quantizer = s.weight_config->describe();
      break;
    }
  }
  return r;
}

double mean_reduction_ratio(const std::vector<SiteError>& sites) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& s : sites) {
    if (s.base_error > 0.0) {
      sum += (s.base_error - s.compensated_error) / s.base_error;
      ++count;
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

void check_reference(const ModelSpec& spec, const ModelSpec& reference) {
  const auto a = spec.sites();
  const auto b = reference.sites();
  if (a.size() != b.size()) throw DimensionError("reference model has a different site layout");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name) {
      throw DimensionError("reference site " + b[i].name + " does not match " + a[i].name);
    }
    if (a[i].kind == SiteKind::kLinear &&
        spec.site_weight(a[i]).shape() != reference.site_weight(b[i]).shape()) {
      throw DimensionError("reference weight shape differs at " + a[i].name);
    }
  }
}

}  // namespace

CalibrationResult calibrate(const QuantizedModel& model, const CalibrationBatch& batch) {
  batch.validate();
  if (model.has_biases()) throw ArgumentError("calibrate: model already has biases attached");
  model.validate();

  const ForwardResult reference = forward_float(model.spec, batch, true);

  CalibrationResult result;
  result.model = model;
  result.model.sequence_length = batch.inputs.rank() == 3 ? batch.inputs.dim(1) : 0;
  CalibratingExecutor ex(result.model, reference.site_outputs);
  const Tensor output = detail::run_graph(model.spec, batch.inputs, ex);
  result.records = std::move(ex.records);

  ErrorReport& r = result.report;
  r = report_header(result.model, "calibration", batch.size());
  for (std::size_t i = 0; i < result.records.size(); ++i) {
    const auto& rec = result.records[i];
    r.sites.push_back({i, rec.site_id, rec.base_error, rec.compensated_error, rec.reduction_term,
                       rec.b});
  }
  r.final_output_error = frobenius_sq(subtract(reference.output, output));
  r.final_output_error_no_bc =
      frobenius_sq(subtract(reference.output, forward_quantized(model, batch).output));
  r.mean_reduction_ratio = mean_reduction_ratio(r.sites);
  return result;
}

ErrorReport evaluate(const QuantizedModel& model, const CalibrationBatch& batch,
                     const ModelSpec& reference, std::string dataset) {
  batch.validate();
  check_reference(model.spec, reference);
  const ForwardResult ref = forward_float(reference, batch, true);
  const ForwardResult quant = forward_quantized(model, batch, true);

  ErrorReport r = report_header(model, std::move(dataset), batch.size());
  const auto infos = model.spec.sites();
  for (std::size_t i = 0; i < infos.size(); ++i) {
    SiteError e;
    e.index = i;
    e.name = infos[i].name;
    e.b = batch.size();
    e.base_error = output_error(output_diff(ref.site_outputs[i], quant.raw_site_outputs[i]));
    e.compensated_error = output_error(output_diff(ref.site_outputs[i], quant.site_outputs[i]));
    e.reduction_term = e.base_error - e.compensated_error;
    r.sites.push_back(std::move(e));
  }
  r.final_output_error = frobenius_sq(subtract(ref.output, quant.output));
  r.final_output_error_no_bc =
      model.has_biases()
          ? frobenius_sq(subtract(ref.output, forward_quantized(model.without_biases(), batch).output))
          : r.final_output_error;
  r.mean_reduction_ratio = mean_reduction_ratio(r.sites);
  return r;
}

std::vector<BiasStatistics> bias_statistics(const QuantizedModel& model) {
  std::vector<BiasStatistics> out;
  const auto infos = model.spec.sites();
  for (std::size_t i = 0; i < model.sites.size() && i < infos.size(); ++i) {
    const auto& bias = model.sites[i].bias;
    if (!bias || bias->size() == 0) continue;
    BiasStatistics s;
    s.index = i;
    s.name = infos[i].name;
    s.length = bias->size();
    const double n = static_cast<double>(s.length);
    for (double v : bias->values.data()) {
      s.mean += v;
      s.abs_mean += std::abs(v);
    }
    s.mean /= n;
    s.abs_mean /= n;
    for (double v : bias->values.data()) s.variance += (v - s.mean) * (v - s.mean);
    s.variance /= n;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace qbc
