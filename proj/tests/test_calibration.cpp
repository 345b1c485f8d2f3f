#include <gtest/gtest.h>

#include <cmath>

#include "qbc/calibration.hpp"
#include "qbc/errors.hpp"
#include "qbc/toy.hpp"

using namespace qbc;

namespace {

struct Toy {
  ModelSpec spec;
  CalibrationBatch calib;
  CalibrationBatch heldout;
};

Toy make_toy(std::uint64_t seed, std::size_t b = 8, const char* arch_text =
                 "transformer:blocks=2,d=32,heads=4,ff=64,seq=16") {
  const auto arch = ArchDescriptor::parse(arch_text);
  RngStream rng(seed);
  Toy t;
  t.spec = make_toy_model(arch, rng);
  t.calib = make_toy_batch(arch, b, rng);
  t.heldout = make_toy_batch(arch, b, rng);
  return t;
}

QuantizedModel weight_only(const ModelSpec& spec, int bits) {
  return quantize_model(spec, QuantMode::kWeightOnly, QuantConfig::per_channel(bits, 1),
                        QuantConfig::per_tensor(bits));
}

}  // namespace

TEST(Calibrate, SingleLinearSiteReducesToCoreOp) {
  const Toy toy = make_toy(3, 6, "mlp:12-5");
  const auto model = weight_only(toy.spec, 3);
  const auto result = calibrate(model, toy.calib);
  const Tensor ref = forward_float(toy.spec, toy.calib).output;
  const Tensor quant = forward_quantized(model, toy.calib).output;
  const BiasVector want = optimal_bias(output_diff(ref, quant));
  ASSERT_TRUE(result.model.sites[0].bias.has_value());
  EXPECT_TRUE(result.model.sites[0].bias->values.identical(want.values));
  EXPECT_EQ(result.model.sites[0].bias->batch_size_used, 6u);
}

TEST(Calibrate, LosslessModelGetsZeroBiases) {
  LinearBlock lin;
  lin.weight = Tensor::matrix({{1, -1}, {0, 1}});
  ModelSpec spec;
  spec.layers = {lin};
  const CalibrationBatch batch{Tensor::matrix({{1, 2}, {-3, 0.5}})};
  const auto result = calibrate(weight_only(spec, 2), batch);
  EXPECT_EQ(max_abs(result.model.sites[0].bias->values), 0.0);
  EXPECT_EQ(result.records[0].base_error, 0.0);
  EXPECT_EQ(result.records[0].compensated_error, 0.0);
}

TEST(Calibrate, TransformerGuaranteeAtEverySite) {
  const Toy toy = make_toy(42);
  for (QuantMode mode : {QuantMode::kWeightOnly, QuantMode::kWeightActivation}) {
    const auto model = quantize_model(toy.spec, mode, QuantConfig::per_channel(3, 1),
                                      QuantConfig::per_tensor(4));
    const auto result = calibrate(model, toy.calib);
    ASSERT_EQ(result.records.size(), 16u);
    for (const auto& rec : result.records) {
      EXPECT_LT(rec.compensated_error, rec.base_error) << rec.site_id;
      EXPECT_LE(std::fabs(rec.base_error - rec.compensated_error - rec.reduction_term),
                1e-9 * rec.base_error);
    }
  }
}

TEST(Calibrate, ResidualColumnMeansVanish) {
  const Toy toy = make_toy(42);
  const auto result = calibrate(weight_only(toy.spec, 3), toy.calib);
  const auto ref = forward_float(toy.spec, toy.calib, true);
  const auto quant = forward_quantized(result.model, toy.calib, true);
  for (std::size_t i = 0; i < 16; ++i) {
    const Tensor means = row_mean(output_diff(ref.site_outputs[i], quant.site_outputs[i]));
    EXPECT_LE(max_abs(means), 1e-9);
  }
}

TEST(Calibrate, EvaluateOnCalibrationBatchReproducesRecords) {
  const Toy toy = make_toy(17);
  const auto result = calibrate(weight_only(toy.spec, 3), toy.calib);
  const ErrorReport report = evaluate(result.model, toy.calib, toy.spec, "calibration");
  ASSERT_EQ(report.sites.size(), result.records.size());
  for (std::size_t i = 0; i < report.sites.size(); ++i) {
    EXPECT_EQ(report.sites[i].base_error, result.records[i].base_error);
    EXPECT_LE(std::fabs(report.sites[i].compensated_error - result.records[i].compensated_error),
              1e-9 * result.records[i].base_error);
    EXPECT_LE(report.sites[i].compensated_error, report.sites[i].base_error);
  }
  EXPECT_LT(report.final_output_error, report.final_output_error_no_bc);
}

TEST(Calibrate, DeterministicAndCodesUntouched) {
  const Toy toy = make_toy(5);
  const auto model = weight_only(toy.spec, 3);
  const auto a = calibrate(model, toy.calib);
  const auto b = calibrate(model, toy.calib);
  for (std::size_t i = 0; i < model.sites.size(); ++i) {
    EXPECT_TRUE(a.model.sites[i].bias->values.identical(b.model.sites[i].bias->values));
    if (model.sites[i].weight) {
      EXPECT_EQ(a.model.sites[i].weight->codes, model.sites[i].weight->codes);
      EXPECT_EQ(a.model.sites[i].weight->scales, model.sites[i].weight->scales);
    }
  }
}

TEST(Calibrate, SingleSampleIsExact) {
  const Toy toy = make_toy(8, 1);
  const auto result = calibrate(weight_only(toy.spec, 3), toy.calib);
  for (const auto& rec : result.records) EXPECT_LE(rec.compensated_error, 1e-9) << rec.site_id;
}

TEST(Calibrate, Preconditions) {
  const Toy toy = make_toy(9);
  const auto model = weight_only(toy.spec, 3);
  EXPECT_THROW(calibrate(model, {Tensor({0, 16, 32})}), ArgumentError);
  const auto once = calibrate(model, toy.calib);
  EXPECT_THROW(calibrate(once.model, toy.calib), ArgumentError);
}

TEST(Calibrate, NonFiniteActivationNamesSite) {
  const Toy toy = make_toy(10, 2, "mlp:4-3");
  auto model = weight_only(toy.spec, 3);
  model.sites[0].weight->scales[0] = 1e308;
  try {
    calibrate(model, {Tensor::matrix({{1e10, 1e10, 1e10, 1e10}, {1, 1, 1, 1}})});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.linear"), std::string::npos);
  }
}

TEST(Evaluate, ZeroBiasModelHasEqualErrors) {
  const Toy toy = make_toy(11);
  const auto report = evaluate(weight_only(toy.spec, 3), toy.heldout, toy.spec);
  for (const auto& s : report.sites) EXPECT_EQ(s.base_error, s.compensated_error);
  EXPECT_FALSE(report.bias_compensation);
  EXPECT_EQ(report.mean_reduction_ratio, 0.0);
}

TEST(Evaluate, HeldOutReportIsFinite) {
  const Toy toy = make_toy(12, 16);
  const auto result = calibrate(weight_only(toy.spec, 3), toy.calib);
  const auto report = evaluate(result.model, toy.heldout, toy.spec);
  EXPECT_EQ(report.dataset, "held-out");
  for (const auto& s : report.sites) {
    EXPECT_TRUE(std::isfinite(s.base_error));
    EXPECT_TRUE(std::isfinite(s.compensated_error));
  }
  EXPECT_TRUE(std::isfinite(report.final_output_error));
}

TEST(Evaluate, ReferenceMustMatchLayout) {
  const Toy toy = make_toy(13);
  const Toy other = make_toy(13, 8, "transformer:blocks=1,d=32,heads=4,ff=64,seq=16");
  EXPECT_THROW(evaluate(weight_only(toy.spec, 3), toy.calib, other.spec), DimensionError);
}

TEST(BiasStatistics, PerSiteSummary) {
  const Toy toy = make_toy(14);
  EXPECT_TRUE(bias_statistics(weight_only(toy.spec, 3)).empty());
  const auto result = calibrate(weight_only(toy.spec, 3), toy.calib);
  const auto stats = bias_statistics(result.model);
  ASSERT_EQ(stats.size(), 16u);
  for (const auto& s : stats) {
    EXPECT_GE(s.abs_mean, std::fabs(s.mean));
    EXPECT_GE(s.variance, 0.0);
  }
  EXPECT_EQ(stats[3].length, 4u * 16 * 16);
}
