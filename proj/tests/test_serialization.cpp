#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "qbc/calibration.hpp"
#include "qbc/errors.hpp"
#include "qbc/serialization.hpp"
#include "qbc/toy.hpp"

using namespace qbc;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "qbc_serialization_test";
  fs::create_directories(dir);
  return dir / name;
}

void expect_same_model(const QuantizedModel& a, const QuantizedModel& b) {
  ASSERT_EQ(a.sites.size(), b.sites.size());
  EXPECT_EQ(a.mode, b.mode);
  EXPECT_EQ(a.sequence_length, b.sequence_length);
  for (std::size_t i = 0; i < a.sites.size(); ++i) {
    const auto& x = a.sites[i];
    const auto& y = b.sites[i];
    ASSERT_EQ(x.weight.has_value(), y.weight.has_value());
    if (x.weight) {
      EXPECT_EQ(x.weight->codes, y.weight->codes);
      EXPECT_EQ(0, std::memcmp(x.weight->scales.data(), y.weight->scales.data(),
                               x.weight->scales.size() * sizeof(double)));
      EXPECT_EQ(x.weight->zero_points, y.weight->zero_points);
      EXPECT_TRUE(x.weight->config == y.weight->config);
    }
    EXPECT_EQ(x.activation_config.has_value(), y.activation_config.has_value());
    ASSERT_EQ(x.bias.has_value(), y.bias.has_value());
    if (x.bias) {
      EXPECT_TRUE(x.bias->values.identical(y.bias->values));
      EXPECT_EQ(x.bias->site_id, y.bias->site_id);
      EXPECT_EQ(x.bias->batch_size_used, y.bias->batch_size_used);
    }
  }
  const auto sa = a.spec.sites();
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i].kind == SiteKind::kLinear) {
      EXPECT_TRUE(a.spec.site_weight(sa[i]).identical(b.spec.site_weight(sa[i])));
    }
  }
}

QuantizedModel calibrated_toy(std::uint64_t seed, QuantMode mode, Scheme scheme) {
  const auto arch = ArchDescriptor::parse("transformer:blocks=2,d=16,heads=2,ff=32,seq=4");
  RngStream rng(seed);
  const ModelSpec spec = make_toy_model(arch, rng);
  const auto batch = make_toy_batch(arch, 4, rng);
  auto model = quantize_model(spec, mode, QuantConfig::per_group(3, 8, scheme),
                              QuantConfig::per_tensor(5, scheme));
  return calibrate(model, batch).model;
}

}  // namespace

TEST(Container, OneElementRoundTrip) {
  Container c;
  c.add_f64("x", Tensor::vector({-0.1}));
  const auto bytes = c.serialize();
  const Container back = Container::parse(bytes);
  EXPECT_TRUE(back.get_tensor("x").identical(Tensor::vector({-0.1})));
  EXPECT_EQ(back.serialize(), bytes);
}

TEST(Container, ByteLayout) {
  Container c;
  c.header["kind"] = "demo";
  c.add_i32("codes", {3}, std::vector<std::int32_t>{-1, 2, 3});
  c.add_f64("v", Tensor::vector({1.0}));
  const auto bytes = c.serialize();
  ASSERT_GE(bytes.size(), 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "QBCM");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= std::uint64_t{bytes[8 + i]} << (8 * i);
  const std::size_t payload = 16 + header_len;
  EXPECT_EQ(payload % 8, 0u);
  const auto head = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + payload);
  EXPECT_EQ(head["kind"], "demo");
  ASSERT_EQ(head["tensors"].size(), 2u);
  EXPECT_EQ(head["tensors"][0]["offset"], 0);
  EXPECT_EQ(head["tensors"][0]["length"], 12);
  EXPECT_EQ(head["tensors"][1]["offset"], 16);
  EXPECT_EQ(head["tensors"][1]["dtype"], "f64");
  // -1 as little-endian i32
  EXPECT_EQ(bytes[payload], 0xff);
  EXPECT_EQ(bytes[payload + 3], 0xff);
  EXPECT_EQ(bytes[payload + 4], 2);
  // 1.0 as little-endian f64: 00 .. 00 f0 3f
  EXPECT_EQ(bytes[payload + 16 + 6], 0xf0);
  EXPECT_EQ(bytes[payload + 16 + 7], 0x3f);
  EXPECT_EQ(bytes.size(), payload + 24);
}

TEST(Container, UnknownFieldsSurvive) {
  Container c;
  c.add_f64("x", Tensor::vector({1, 2}));
  auto bytes = c.serialize();
  Container parsed = Container::parse(bytes);
  parsed.header["future_field"] = {{"nested", 3}};
  auto reparsed = Container::parse(parsed.serialize());
  EXPECT_EQ(reparsed.header["future_field"]["nested"], 3);

  // Unknown keys inside a tensor descriptor too.
  nlohmann::json head = {{"tensors",
                          {{{"name", "x"}, {"dtype", "f64"}, {"shape", {1}}, {"offset", 0},
                            {"length", 8}, {"quant_hint", "keep"}}}}};
  std::string text = head.dump();
  text.append((8 - (16 + text.size()) % 8) % 8, ' ');
  std::vector<std::uint8_t> raw = {'Q', 'B', 'C', 'M', 1, 0, 0, 0};
  for (int i = 0; i < 8; ++i) raw.push_back(static_cast<std::uint8_t>(text.size() >> (8 * i)));
  raw.insert(raw.end(), text.begin(), text.end());
  raw.resize(raw.size() + 8, 0);
  const auto again = Container::parse(Container::parse(raw).serialize());
  EXPECT_EQ(again.entry("x").extra["quant_hint"], "keep");
}

TEST(Container, NegativeCases) {
  Container c;
  c.add_f64("a", Tensor::vector({1, 2}));
  c.add_f64("b", Tensor::vector({3}));
  const auto good = c.serialize();

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(Container::parse(bad_magic), FormatError);

  auto bad_version = good;
  bad_version[4] = 2;
  EXPECT_THROW(Container::parse(bad_version), FormatError);

  auto truncated = good;
  truncated.resize(truncated.size() - 4);
  EXPECT_THROW(Container::parse(truncated), IoError);
  EXPECT_THROW(Container::parse(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)), IoError);

  // Rewrite b's offset to overlap a.
  Container parsed = Container::parse(good);
  std::string text(good.begin() + 16, good.end() - 24);
  const auto pos = text.find("\"offset\":16");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 11, "\"offset\":8 ");
  std::vector<std::uint8_t> overlap(good.begin(), good.begin() + 16);
  overlap.insert(overlap.end(), text.begin(), text.end());
  overlap.insert(overlap.end(), good.end() - 24, good.end());
  try {
    Container::parse(overlap);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("overlaps"), std::string::npos);
  }
}

TEST(ModelFile, CalibratedRoundTripIsBitIdentical) {
  for (QuantMode mode : {QuantMode::kWeightOnly, QuantMode::kWeightActivation}) {
    for (Scheme scheme : {Scheme::kSymmetric, Scheme::kAsymmetric}) {
      const QuantizedModel model = calibrated_toy(31, mode, scheme);
      const fs::path path = temp_path("model.qbcm");
      write_model(path, model);
      expect_same_model(model, read_model(path));
    }
  }
}

TEST(ModelFile, F32BiasesAreFlagged) {
  const QuantizedModel model = calibrated_toy(32, QuantMode::kWeightOnly, Scheme::kSymmetric);
  const Container c = model_to_container(model, {true});
  EXPECT_EQ(bias_precision(c), "f32");
  EXPECT_EQ(c.entry("sites.0.bias").dtype, DType::kF32);
  const QuantizedModel back = model_from_container(Container::parse(c.serialize()));
  EXPECT_FLOAT_EQ(back.sites[0].bias->values[0], model.sites[0].bias->values[0]);
}

TEST(ModelFile, FloatSpecRoundTrip) {
  const auto arch = ArchDescriptor::parse("mlp:6-5-4");
  RngStream rng(33);
  const ModelSpec spec = make_toy_model(arch, rng);
  const fs::path path = temp_path("spec.qbcm");
  write_model_spec(path, spec);
  const ModelSpec back = read_model_spec(path);
  ASSERT_EQ(back.layers.size(), 2u);
  EXPECT_TRUE(std::get<LinearBlock>(back.layers[1]).weight.identical(
      std::get<LinearBlock>(spec.layers[1]).weight));
  EXPECT_EQ(std::get<LinearBlock>(back.layers[0]).activation, Activation::kGelu);
  EXPECT_THROW(read_model(path), FormatError);
}

TEST(BatchFile, RandomRoundTrips) {
  RngStream rng(34);
  for (int trial = 0; trial < 10; ++trial) {
    const CalibrationBatch batch{rng.normal_tensor({1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(5)})};
    const fs::path path = temp_path("batch.qbcm");
    write_batch(path, batch);
    EXPECT_TRUE(read_batch(path).inputs.identical(batch.inputs));
  }
  EXPECT_THROW(read_batch(temp_path("missing.qbcm")), IoError);
}

TEST(ModelFile, RejectsInvariantViolations) {
  const QuantizedModel model = calibrated_toy(35, QuantMode::kWeightOnly, Scheme::kSymmetric);
  Container c = model_to_container(model);
  c.header["sites"][0]["weight_config"]["bits"] = 12;
  EXPECT_THROW(model_from_container(Container::parse(c.serialize())), ValidationError);

  Container d = model_to_container(model);
  d.header["sites"].erase(d.header["sites"].size() - 1);
  EXPECT_THROW(model_from_container(Container::parse(d.serialize())), ValidationError);

  Container e = model_to_container(model);
  e.header["layers"][0]["n_heads"] = "two";
  EXPECT_THROW(model_from_container(Container::parse(e.serialize())), ValidationError);
}

// Random byte flips, truncations and header edits. Every outcome must be a
// parsed model or a qbc::Error; anything else (crash, foreign exception)
// fails the test.
TEST(ModelFile, FuzzedContainersNeverCrash) {
  const QuantizedModel model = calibrated_toy(36, QuantMode::kWeightActivation, Scheme::kAsymmetric);
  const auto good = model_to_container(model).serialize();
  RngStream rng(37);
  int rejected = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto bytes = good;
    switch (trial % 4) {
      case 0:
        for (int k = 0; k < 4; ++k) bytes[rng.below(bytes.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
        break;
      case 1:
        bytes.resize(rng.below(bytes.size()));
        break;
      case 2:  // flip inside the JSON header
        bytes[16 + rng.below(400)] = static_cast<std::uint8_t>(rng.below(256));
        break;
      case 3:
        for (int k = 0; k < 8; ++k) bytes[8 + k] = static_cast<std::uint8_t>(rng.below(256));
        break;
    }
    try {
      model_from_container(Container::parse(bytes));
    } catch (const Error&) {
      ++rejected;
    }
  }
  EXPECT_GT(rejected, 50);
}

TEST(Report, JsonSchemaAndCsv) {
  ErrorReport r;
  r.dataset = "calibration";
  r.bits = 3;
  r.b = 8;
  r.sites = {{0, "block0.q_proj", 2.0, 1.5, 0.5, 8}, {1, "block0.k_proj", 1.0, 0.25, 0.75, 8}};
  const auto j = report_to_json({r});
  EXPECT_EQ(j["format"], "qbc.report");
  const auto& site = j["reports"][0]["sites"][1];
  for (const char* key : {"site_index", "site_name", "base_error", "compensated_error",
                          "reduction_term", "b", "bits", "mode"}) {
    EXPECT_TRUE(site.contains(key)) << key;
  }
  EXPECT_EQ(site["mode"], "weight-only");
  const fs::path csv = temp_path("errors.csv");
  write_error_csv(csv, r);
  std::ifstream in(csv);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "site_index,site_name,base_error,compensated_error");
  EXPECT_EQ(row, "0,block0.q_proj,2,1.5");
}
