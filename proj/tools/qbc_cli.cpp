// qbc: toy-model generation, RTN quantization with bias compensation,
// held-out evaluation and figure-data export.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "qbc/calibration.hpp"
#include "qbc/errors.hpp"
#include "qbc/rng.hpp"
#include "qbc/serialization.hpp"
#include "qbc/toy.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

int exit_code_for(qbc::ErrorKind kind) {
  switch (kind) {
    case qbc::ErrorKind::kIo:
    case qbc::ErrorKind::kFormat:
    case qbc::ErrorKind::kValidation:
      return kIo;
    case qbc::ErrorKind::kNumeric:
    case qbc::ErrorKind::kInstability:
      return kNumeric;
    default:
      return kUsage;
  }
}

struct QuantOptions {
  int bits = 3;
  std::string scheme = "symmetric";
  std::string granularity = "per-channel";
  std::optional<std::size_t> group_size;
  std::string mode = "weight-only";
  bool no_bc = false;
  bool f32_biases = false;
};

// Everything CLI11 cannot check on its own. Runs before any file is read.
struct ValidatedQuant {
  qbc::QuantConfig weight;
  qbc::QuantConfig activation;
  qbc::QuantMode mode;
};

ValidatedQuant validate(const QuantOptions& o) {
  ValidatedQuant v;
  const auto scheme = qbc::parse_scheme(o.scheme);
  const auto granularity = qbc::parse_granularity(o.granularity);
  if (o.group_size && granularity != qbc::Granularity::kPerGroup) {
    throw qbc::ConfigError("--group-size is only valid with --granularity per-group");
  }
  switch (granularity) {
    case qbc::Granularity::kPerTensor: v.weight = qbc::QuantConfig::per_tensor(o.bits, scheme); break;
    case qbc::Granularity::kPerChannel:
      v.weight = qbc::QuantConfig::per_channel(o.bits, 1, scheme);
      break;
    case qbc::Granularity::kPerGroup:
      v.weight = qbc::QuantConfig::per_group(o.bits, o.group_size.value_or(64), scheme);
      break;
  }
  v.weight.validate();
  v.activation = qbc::QuantConfig::per_tensor(o.bits, scheme);
  v.mode = qbc::parse_mode(o.mode);
  return v;
}

void print_report(const qbc::ErrorReport& r) {
  std::printf("%s report: %zu sites, b=%zu, %s, %s, bias compensation %s\n", r.dataset.c_str(),
              r.sites.size(), r.b, r.weight_quantizer.c_str(), qbc::to_string(r.mode).c_str(),
              r.bias_compensation ? "on" : "off");
  std::printf("  %-4s %-22s %14s %14s %8s\n", "idx", "site", "base", "compensated", "reduced");
  for (const auto& s : r.sites) {
    const double pct = s.base_error > 0 ? 100.0 * (s.base_error - s.compensated_error) / s.base_error : 0.0;
    std::printf("  %-4zu %-22s %14.6g %14.6g %7.2f%%\n", s.index, s.name.c_str(), s.base_error,
                s.compensated_error, pct);
  }
  std::printf("  final output error: %.6g (without bias compensation: %.6g)\n",
              r.final_output_error, r.final_output_error_no_bc);
  std::printf("  mean reduction ratio: %.4f\n", r.mean_reduction_ratio);
}

void add_quant_options(CLI::App* cmd, QuantOptions& o) {
  cmd->add_option("--bits", o.bits, "Weight/activation bit width")->check(CLI::Range(2, 8));
  cmd->add_option("--scheme", o.scheme, "Quantizer scheme")
      ->check(CLI::IsMember({"symmetric", "asymmetric"}));
  cmd->add_option("--granularity", o.granularity, "Weight quantizer granularity")
      ->check(CLI::IsMember({"per-tensor", "per-channel", "per-group"}));
  cmd->add_option("--group-size", o.group_size, "Group size for per-group (default 64)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--mode", o.mode, "Quantization mode")
      ->check(CLI::IsMember({"weight-only", "weight-activation"}));
  cmd->add_flag("--no-bc", o.no_bc, "Quantize without attaching bias vectors (ablation)");
  cmd->add_flag("--f32-biases", o.f32_biases, "Store bias vectors as f32 (lossy)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Round-to-nearest quantization with bias compensation"};
  app.require_subcommand(1);

  // gen
  std::string arch_text;
  std::uint64_t seed = 42;
  std::size_t batch_size = 8;
  std::filesystem::path gen_model = "model.qbcm", gen_calib = "calib.qbcm",
                        gen_heldout = "heldout.qbcm";
  auto* gen = app.add_subcommand("gen", "Generate a toy model with calibration/held-out batches");
  gen->add_option("--arch", arch_text,
                  "transformer:blocks=2,d=32,heads=4,ff=64,seq=16 or mlp:784-256-64")
      ->required();
  gen->add_option("--seed", seed, "RNG seed");
  gen->add_option("--batch-size", batch_size, "Samples per batch")->check(CLI::PositiveNumber);
  gen->add_option("--model-out", gen_model, "Float model file");
  gen->add_option("--calib-out", gen_calib, "Calibration batch file");
  gen->add_option("--heldout-out", gen_heldout, "Held-out batch file");

  // calibrate
  QuantOptions qopts;
  std::filesystem::path cal_model, cal_batch, cal_out = "calibrated.qbcm", cal_report, cal_csv;
  auto* cal = app.add_subcommand("calibrate", "Quantize a float model and compute bias vectors");
  cal->add_option("--model", cal_model, "Float model file")->required()->check(CLI::ExistingFile);
  cal->add_option("--batch", cal_batch, "Calibration batch")->required()->check(CLI::ExistingFile);
  cal->add_option("--out", cal_out, "Quantized model output");
  cal->add_option("--report", cal_report, "Report JSON output");
  cal->add_option("--csv", cal_csv, "Per-site error CSV output");
  add_quant_options(cal, qopts);

  // eval
  std::filesystem::path ev_model, ev_batch, ev_ref, ev_report, ev_csv;
  std::string ev_label = "held-out";
  auto* ev = app.add_subcommand("eval", "Per-site errors of a quantized model on a batch");
  ev->add_option("--model", ev_model, "Quantized model file")->required()->check(CLI::ExistingFile);
  ev->add_option("--batch", ev_batch, "Evaluation batch")->required()->check(CLI::ExistingFile);
  ev->add_option("--reference", ev_ref, "Float reference model (default: the model's own weights)")
      ->check(CLI::ExistingFile);
  ev->add_option("--label", ev_label, "Dataset label written to the report");
  ev->add_option("--report", ev_report, "Report JSON output");
  ev->add_option("--csv", ev_csv, "Per-site error CSV output");

  // inspect
  std::filesystem::path in_model, in_csv;
  auto* insp = app.add_subcommand("inspect", "Bias vector statistics per site");
  insp->add_option("--model", in_model, "Quantized model file")->required()->check(CLI::ExistingFile);
  insp->add_option("--csv", in_csv, "Bias statistics CSV output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) {
      const auto arch = qbc::ArchDescriptor::parse(arch_text);
      qbc::RngStream rng(seed);
      const qbc::ModelSpec spec = qbc::make_toy_model(arch, rng);
      const auto calib = qbc::make_toy_batch(arch, batch_size, rng);
      const auto heldout = qbc::make_toy_batch(arch, batch_size, rng);
      qbc::write_model_spec(gen_model, spec);
      qbc::write_batch(gen_calib, calib);
      qbc::write_batch(gen_heldout, heldout);
      std::printf("generated %s: %zu quantized sites, batch %s\n", arch.to_string().c_str(),
                  spec.sites().size(), qbc::shape_to_string(calib.inputs.shape()).c_str());
      return kOk;
    }

    if (*cal) {
      const ValidatedQuant vq = validate(qopts);
      const qbc::ModelSpec spec = qbc::read_model_spec(cal_model);
      const qbc::CalibrationBatch batch = qbc::read_batch(cal_batch);
      const qbc::QuantizedModel quantized =
          qbc::quantize_model(spec, vq.mode, vq.weight, vq.activation);

      qbc::QuantizedModel result_model;
      qbc::ErrorReport report;
      if (qopts.no_bc) {
        result_model = quantized;
        report = qbc::evaluate(quantized, batch, spec, "calibration");
      } else {
        auto result = qbc::calibrate(quantized, batch);
        result_model = std::move(result.model);
        report = std::move(result.report);
      }
      report.bias_precision = qopts.f32_biases ? "f32" : "f64";
      for (const auto& s : report.sites) {
        if (s.compensated_error > s.base_error) {
          throw qbc::NumericError("compensated error exceeds base error at " + s.name);
        }
      }
      qbc::write_model(cal_out, result_model, {qopts.f32_biases});
      if (!cal_report.empty()) qbc::write_report(cal_report, {report});
      if (!cal_csv.empty()) qbc::write_error_csv(cal_csv, report);
      print_report(report);
      return kOk;
    }

    if (*ev) {
      const auto container = qbc::Container::read_file(ev_model);
      const qbc::QuantizedModel model = qbc::model_from_container(container);
      const qbc::CalibrationBatch batch = qbc::read_batch(ev_batch);
      const qbc::ModelSpec reference = ev_ref.empty() ? model.spec : qbc::read_model_spec(ev_ref);
      qbc::ErrorReport report = qbc::evaluate(model, batch, reference, ev_label);
      report.bias_precision = qbc::bias_precision(container);
      if (!ev_report.empty()) qbc::write_report(ev_report, {report});
      if (!ev_csv.empty()) qbc::write_error_csv(ev_csv, report);
      print_report(report);
      return kOk;
    }

    if (*insp) {
      const qbc::QuantizedModel model = qbc::read_model(in_model);
      const auto stats = qbc::bias_statistics(model);
      if (stats.empty()) std::fprintf(stderr, "warning: model has no bias vectors attached\n");
      if (!in_csv.empty()) qbc::write_bias_csv(in_csv, stats);
      std::printf("%-4s %-22s %8s %14s %14s %14s\n", "idx", "site", "length", "mean", "abs_mean",
                  "variance");
      for (const auto& s : stats) {
        std::printf("%-4zu %-22s %8zu %14.6g %14.6g %14.6g\n", s.index, s.name.c_str(), s.length,
                    s.mean, s.abs_mean, s.variance);
      }
      return kOk;
    }
  } catch (const qbc::Error& e) {
    std::fprintf(stderr, "qbc: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "qbc: %s\n", e.what());
    return kIo;
  }
  return kOk;
}
