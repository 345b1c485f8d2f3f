#include "qbc/serialization.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "qbc/errors.hpp"

namespace qbc {

namespace {

using nlohmann::json;

constexpr const char* kModelKind = "qbc.model";
constexpr const char* kBatchKind = "qbc.batch";

std::string layer_key(std::size_t i, const char* name) {
  return "layers." + std::to_string(i) + "." + name;
}

std::string site_key(std::size_t i, const char* name) {
  return "sites." + std::to_string(i) + "." + name;
}

const json& require(const json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ValidationError(where + "." + key + ": missing");
  return j.at(key);
}

std::size_t require_size(const json& j, const std::string& key, const std::string& where) {
  const json& v = require(j, key, where);
  if (!v.is_number_unsigned()) {
    throw ValidationError(where + "." + key + ": must be an unsigned integer");
  }
  return v.get<std::size_t>();
}

// Runs `fn`, converting structural errors from partially valid input into
// ValidationError so callers see one error category for bad files.
template <typename Fn>
auto as_validation(Fn&& fn) {
  try {
    return fn();
  } catch (const ValidationError&) {
    throw;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("header: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kIo || e.kind() == ErrorKind::kFormat) throw;
    throw ValidationError(e.what());
  }
}

void require_kind(const Container& c, const char* kind) {
  if (!c.header.contains("kind") || c.header["kind"] != kind) {
    throw FormatError(std::string("expected a ") + kind + " container");
  }
}

void add_spec(Container& c, const ModelSpec& spec) {
  json layers = json::array();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (const auto* lin = std::get_if<LinearBlock>(&spec.layers[i])) {
      layers.push_back({{"type", "linear"},
                        {"activation", to_string(lin->activation)},
                        {"has_bias", lin->bias.has_value()}});
      c.add_f64(layer_key(i, "weight"), lin->weight);
      if (lin->bias) c.add_f64(layer_key(i, "bias"), *lin->bias);
      continue;
    }
    const auto& tb = std::get<TransformerBlock>(spec.layers[i]);
    layers.push_back({{"type", "transformer"},
                      {"d_model", tb.d_model},
                      {"n_heads", tb.n_heads},
                      {"d_ff", tb.d_ff},
                      {"layernorm", tb.layernorm}});
    const std::pair<const char*, const Tensor*> tensors[] = {
        {"wq", &tb.wq}, {"wk", &tb.wk}, {"wv", &tb.wv}, {"wo", &tb.wo}, {"bq", &tb.bq},
        {"bk", &tb.bk}, {"bv", &tb.bv}, {"bo", &tb.bo}, {"w1", &tb.w1}, {"b1", &tb.b1},
        {"w2", &tb.w2}, {"b2", &tb.b2}};
    for (const auto& [name, t] : tensors) c.add_f64(layer_key(i, name), *t);
    if (tb.layernorm) {
      c.add_f64(layer_key(i, "ln1_gamma"), tb.ln1_gamma);
      c.add_f64(layer_key(i, "ln1_beta"), tb.ln1_beta);
      c.add_f64(layer_key(i, "ln2_gamma"), tb.ln2_gamma);
      c.add_f64(layer_key(i, "ln2_beta"), tb.ln2_beta);
    }
  }
  c.header["layers"] = std::move(layers);
}

ModelSpec read_spec(const Container& c) {
  ModelSpec spec;
  const json& layers = require(c.header, "layers", "header");
  if (!layers.is_array()) throw ValidationError("header.layers: must be an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const json& l = layers[i];
    const std::string where = "header.layers[" + std::to_string(i) + "]";
    const std::string type = require(l, "type", where).get<std::string>();
    if (type == "linear") {
      LinearBlock lin;
      lin.weight = c.get_tensor(layer_key(i, "weight"));
      lin.activation = parse_activation(require(l, "activation", where).get<std::string>());
      if (require(l, "has_bias", where).get<bool>()) lin.bias = c.get_tensor(layer_key(i, "bias"));
      spec.layers.emplace_back(std::move(lin));
    } else if (type == "transformer") {
      TransformerBlock tb;
      tb.d_model = require_size(l, "d_model", where);
      tb.n_heads = require_size(l, "n_heads", where);
      tb.d_ff = require_size(l, "d_ff", where);
      tb.layernorm = require(l, "layernorm", where).get<bool>();
      const std::pair<const char*, Tensor*> tensors[] = {
          {"wq", &tb.wq}, {"wk", &tb.wk}, {"wv", &tb.wv}, {"wo", &tb.wo}, {"bq", &tb.bq},
          {"bk", &tb.bk}, {"bv", &tb.bv}, {"bo", &tb.bo}, {"w1", &tb.w1}, {"b1", &tb.b1},
          {"w2", &tb.w2}, {"b2", &tb.b2}};
      for (const auto& [name, t] : tensors) *t = c.get_tensor(layer_key(i, name));
      if (tb.layernorm) {
        tb.ln1_gamma = c.get_tensor(layer_key(i, "ln1_gamma"));
        tb.ln1_beta = c.get_tensor(layer_key(i, "ln1_beta"));
        tb.ln2_gamma = c.get_tensor(layer_key(i, "ln2_gamma"));
        tb.ln2_beta = c.get_tensor(layer_key(i, "ln2_beta"));
      }
      spec.layers.emplace_back(std::move(tb));
    } else {
      throw ValidationError(where + ".type: unknown layer type '" + type + "'");
    }
  }
  spec.validate();
  return spec;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace

json config_to_json(const QuantConfig& cfg) {
  return {{"bits", cfg.bits},
          {"scheme", to_string(cfg.scheme)},
          {"granularity", to_string(cfg.granularity)},
          {"axis", cfg.axis},
          {"group_size", cfg.group_size}};
}

QuantConfig config_from_json(const json& j) {
  const std::string where = "quant_config";
  QuantConfig cfg;
  const json& bits = require(j, "bits", where);
  if (!bits.is_number_integer()) throw ValidationError(where + ".bits: must be an integer");
  cfg.bits = bits.get<int>();
  cfg.scheme = parse_scheme(require(j, "scheme", where).get<std::string>());
  cfg.granularity = parse_granularity(require(j, "granularity", where).get<std::string>());
  cfg.axis = require_size(j, "axis", where);
  cfg.group_size = require_size(j, "group_size", where);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ValidationError(where + ": " + e.what());
  }
  return cfg;
}

Container spec_to_container(const ModelSpec& spec) {
  Container c;
  c.header["kind"] = kModelKind;
  c.header["quantized"] = false;
  add_spec(c, spec);
  return c;
}

Container model_to_container(const QuantizedModel& model, const ModelWriteOptions& options) {
  Container c = spec_to_container(model.spec);
  c.header["quantized"] = true;
  c.header["mode"] = to_string(model.mode);
  c.header["sequence_length"] = model.sequence_length;
  c.header["bias_precision"] = options.f32_biases ? "f32" : "f64";
  json sites = json::array();
  const auto infos = model.spec.sites();
  for (std::size_t i = 0; i < model.sites.size(); ++i) {
    const auto& sq = model.sites[i];
    json s = {{"name", i < infos.size() ? infos[i].name : std::string()}};
    s["weight_config"] = sq.weight_config ? config_to_json(*sq.weight_config) : json(nullptr);
    s["activation_config"] =
        sq.activation_config ? config_to_json(*sq.activation_config) : json(nullptr);
    s["has_weight"] = sq.weight.has_value();
    s["has_bias"] = sq.bias.has_value();
    if (sq.weight) {
      const auto& q = *sq.weight;
      c.add_i32(site_key(i, "codes"), q.shape, q.codes);
      c.add_f64(site_key(i, "scales"), Tensor({q.scales.size()}, q.scales));
      if (!q.zero_points.empty()) {
        c.add_i32(site_key(i, "zero_points"), {q.zero_points.size()}, q.zero_points);
      }
    }
    if (sq.bias) {
      s["bias_site_id"] = sq.bias->site_id;
      s["bias_batch_size"] = sq.bias->batch_size_used;
      if (options.f32_biases) {
        c.add_f32(site_key(i, "bias"), sq.bias->values);
      } else {
        c.add_f64(site_key(i, "bias"), sq.bias->values);
      }
    }
    sites.push_back(std::move(s));
  }
  c.header["sites"] = std::move(sites);
  return c;
}

bool is_quantized_model_file(const Container& c) {
  return c.header.contains("quantized") && c.header["quantized"].is_boolean() &&
         c.header["quantized"].get<bool>();
}

std::string bias_precision(const Container& c) {
  if (c.header.contains("bias_precision") && c.header["bias_precision"] == "f32") return "f32";
  return "f64";
}

ModelSpec spec_from_container(const Container& c) {
  require_kind(c, kModelKind);
  return as_validation([&] { return read_spec(c); });
}

QuantizedModel model_from_container(const Container& c) {
  require_kind(c, kModelKind);
  if (!is_quantized_model_file(c)) {
    throw FormatError("model file holds only float weights; run calibrate first");
  }
  return as_validation([&] {
    QuantizedModel model;
    model.spec = read_spec(c);
    model.mode = parse_mode(require(c.header, "mode", "header").get<std::string>());
    model.sequence_length = require_size(c.header, "sequence_length", "header");
    const json& sites = require(c.header, "sites", "header");
    if (!sites.is_array()) throw ValidationError("header.sites: must be an array");
    for (std::size_t i = 0; i < sites.size(); ++i) {
      const json& s = sites[i];
      const std::string where = "header.sites[" + std::to_string(i) + "]";
      SiteQuantization sq;
      const json& wc = require(s, "weight_config", where);
      if (!wc.is_null()) sq.weight_config = config_from_json(wc);
      const json& ac = require(s, "activation_config", where);
      if (!ac.is_null()) sq.activation_config = config_from_json(ac);
      if (require(s, "has_weight", where).get<bool>()) {
        if (!sq.weight_config) throw ValidationError(where + ".weight_config: missing");
        QuantizedTensor q;
        q.config = *sq.weight_config;
        q.shape = c.entry(site_key(i, "codes")).shape;
        q.codes = c.get_i32(site_key(i, "codes"));
        q.scales = c.get_tensor(site_key(i, "scales")).values();
        if (c.contains(site_key(i, "zero_points"))) q.zero_points = c.get_i32(site_key(i, "zero_points"));
        q.validate();
        sq.weight = std::move(q);
      }
      if (require(s, "has_bias", where).get<bool>()) {
        BiasVector bias;
        bias.values = c.get_tensor(site_key(i, "bias"));
        bias.site_id = require(s, "bias_site_id", where).get<std::string>();
        bias.batch_size_used = require_size(s, "bias_batch_size", where);
        sq.bias = std::move(bias);
      }
      model.sites.push_back(std::move(sq));
    }
    model.validate();
    return model;
  });
}

void write_model(const std::filesystem::path& path, const QuantizedModel& model,
                 const ModelWriteOptions& options) {
  model_to_container(model, options).write_file(path);
}

QuantizedModel read_model(const std::filesystem::path& path) {
  return model_from_container(Container::read_file(path));
}

void write_model_spec(const std::filesystem::path& path, const ModelSpec& spec) {
  spec_to_container(spec).write_file(path);
}

ModelSpec read_model_spec(const std::filesystem::path& path) {
  return spec_from_container(Container::read_file(path));
}

void write_batch(const std::filesystem::path& path, const CalibrationBatch& batch) {
  Container c;
  c.header["kind"] = kBatchKind;
  c.add_f64("inputs", batch.inputs);
  c.write_file(path);
}

CalibrationBatch read_batch(const std::filesystem::path& path) {
  const Container c = Container::read_file(path);
  require_kind(c, kBatchKind);
  return as_validation([&] {
    CalibrationBatch batch{c.get_tensor("inputs")};
    batch.validate();
    return batch;
  });
}

json report_to_json(const std::vector<ErrorReport>& reports) {
  json out = {{"format", "qbc.report"}, {"version", 1}};
  json list = json::array();
  for (const auto& r : reports) {
    json sites = json::array();
    for (const auto& s : r.sites) {
      sites.push_back({{"site_index", s.index},
                       {"site_name", s.name},
                       {"base_error", s.base_error},
                       {"compensated_error", s.compensated_error},
                       {"reduction_term", s.reduction_term},
                       {"b", s.b},
                       {"bits", r.bits},
                       {"mode", to_string(r.mode)}});
    }
    list.push_back({{"dataset", r.dataset},
                    {"mode", to_string(r.mode)},
                    {"bits", r.bits},
                    {"weight_quantizer", r.weight_quantizer},
                    {"bias_compensation", r.bias_compensation},
                    {"bias_precision", r.bias_precision},
                    {"b", r.b},
                    {"final_output_error", r.final_output_error},
                    {"final_output_error_no_bc", r.final_output_error_no_bc},
                    {"mean_reduction_ratio", r.mean_reduction_ratio},
                    {"sites", std::move(sites)}});
  }
  out["reports"] = std::move(list);
  return out;
}

void write_report(const std::filesystem::path& path, const std::vector<ErrorReport>& reports) {
  write_text(path, report_to_json(reports).dump(2) + "\n");
}

void write_error_csv(const std::filesystem::path& path, const ErrorReport& report) {
  std::ostringstream os;
  os << "site_index,site_name,base_error,compensated_error\n";
  for (const auto& s : report.sites) {
    os << s.index << ',' << s.name << ',' << format_double(s.base_error) << ','
       << format_double(s.compensated_error) << '\n';
  }
  write_text(path, os.str());
}

void write_bias_csv(const std::filesystem::path& path, const std::vector<BiasStatistics>& stats) {
  std::ostringstream os;
  os << "site_index,site_name,length,mean,abs_mean,variance\n";
  for (const auto& s : stats) {
    os << s.index << ',' << s.name << ',' << s.length << ',' << format_double(s.mean) << ','
       << format_double(s.abs_mean) << ',' << format_double(s.variance) << '\n';
  }
  write_text(path, os.str());
}

}  // namespace qbc
