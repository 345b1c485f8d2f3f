#include "qbc/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "graph_internal.hpp"
#include "qbc/errors.hpp"

namespace qbc {

std::string to_string(Activation activation) {
  switch (activation) {
    case Activation::kNone: return "none";
    case Activation::kRelu: return "relu";
    case Activation::kGelu: return "gelu";
  }
  return "?";
}

Activation parse_activation(const std::string& text) {
  if (text == "none") return Activation::kNone;
  if (text == "relu") return Activation::kRelu;
  if (text == "gelu") return Activation::kGelu;
  throw ConfigError("unknown activation '" + text + "'");
}

std::string to_string(QuantMode mode) {
  return mode == QuantMode::kWeightOnly ? "weight-only" : "weight-activation";
}

QuantMode parse_mode(const std::string& text) {
  if (text == "weight-only") return QuantMode::kWeightOnly;
  if (text == "weight-activation") return QuantMode::kWeightActivation;
  throw ConfigError("unknown mode '" + text + "'");
}

namespace {

constexpr const char* kTransformerSlots[kSitesPerTransformerBlock] = {
    "q_proj", "k_proj", "v_proj", "bmm_scores", "bmm_context", "o_proj", "fc1", "fc2"};

bool slot_is_bmm(std::size_t slot) { return slot == 3 || slot == 4; }

void expect_shape(const Tensor& t, const Shape& shape, const std::string& what) {
  if (t.shape() != shape) {
    throw GraphError(what + ": expected " + shape_to_string(shape) + ", got " +
                     shape_to_string(t.shape()));
  }
}

void validate_block(const TransformerBlock& tb, const std::string& where) {
  const std::size_t d = tb.d_model, ff = tb.d_ff;
  if (d == 0 || ff == 0 || tb.n_heads == 0) throw GraphError(where + ": zero-sized dimension");
  if (d % tb.n_heads != 0) {
    throw GraphError(where + ": d_model " + std::to_string(d) + " not divisible by " +
                     std::to_string(tb.n_heads) + " heads");
  }
  for (auto [w, name] : {std::pair{&tb.wq, "wq"}, {&tb.wk, "wk"}, {&tb.wv, "wv"}, {&tb.wo, "wo"}})
    expect_shape(*w, {d, d}, where + "." + name);
  for (auto [v, name] : {std::pair{&tb.bq, "bq"}, {&tb.bk, "bk"}, {&tb.bv, "bv"}, {&tb.bo, "bo"},
                         {&tb.b2, "b2"}})
    expect_shape(*v, {d}, where + "." + name);
  expect_shape(tb.w1, {d, ff}, where + ".w1");
  expect_shape(tb.b1, {ff}, where + ".b1");
  expect_shape(tb.w2, {ff, d}, where + ".w2");
  if (tb.layernorm) {
    for (auto [v, name] : {std::pair{&tb.ln1_gamma, "ln1_gamma"}, {&tb.ln1_beta, "ln1_beta"},
                           {&tb.ln2_gamma, "ln2_gamma"}, {&tb.ln2_beta, "ln2_beta"}})
      expect_shape(*v, {d}, where + "." + name);
  }
}

}  // namespace

std::vector<SiteInfo> ModelSpec::sites() const {
  std::vector<SiteInfo> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (std::holds_alternative<LinearBlock>(layers[i])) {
      out.push_back({"layer" + std::to_string(i) + ".linear", SiteKind::kLinear, i, 0});
    } else {
      for (std::size_t slot = 0; slot < kSitesPerTransformerBlock; ++slot) {
        out.push_back({"block" + std::to_string(i) + "." + kTransformerSlots[slot],
                       slot_is_bmm(slot) ? SiteKind::kBmm : SiteKind::kLinear, i, slot});
      }
    }
  }
  return out;
}

const Tensor& ModelSpec::site_weight(const SiteInfo& site) const {
  if (site.kind != SiteKind::kLinear) throw GraphError(site.name + " has no weight operand");
  const Block& block = layers.at(site.block);
  if (const auto* lin = std::get_if<LinearBlock>(&block)) return lin->weight;
  const auto& tb = std::get<TransformerBlock>(block);
  switch (site.slot) {
    case 0: return tb.wq;
    case 1: return tb.wk;
    case 2: return tb.wv;
    case 5: return tb.wo;
    case 6: return tb.w1;
    case 7: return tb.w2;
  }
  throw GraphError(site.name + " has no weight operand");
}

std::size_t ModelSpec::input_features() const {
  if (layers.empty()) throw GraphError("model has no layers");
  if (const auto* lin = std::get_if<LinearBlock>(&layers.front())) {
    return lin->weight.rank() == 2 ? lin->weight.dim(0) : 0;
  }
  return std::get<TransformerBlock>(layers.front()).d_model;
}

bool ModelSpec::expects_sequence() const {
  return std::any_of(layers.begin(), layers.end(), [](const Block& b) {
    return std::holds_alternative<TransformerBlock>(b);
  });
}

void ModelSpec::validate() const {
  if (layers.empty()) throw GraphError("model has no layers");
  std::size_t features = input_features();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "layer" + std::to_string(i);
    if (const auto* lin = std::get_if<LinearBlock>(&layers[i])) {
      if (lin->weight.rank() != 2) throw GraphError(where + ": weight must be rank 2");
      if (lin->weight.dim(0) != features) {
        throw GraphError(where + ": weight " + shape_to_string(lin->weight.shape()) +
                         " does not accept " + std::to_string(features) + " input features");
      }
      if (lin->bias) expect_shape(*lin->bias, {lin->weight.dim(1)}, where + ".bias");
      if (!lin->weight.all_finite()) throw GraphError(where + ": non-finite weight");
      features = lin->weight.dim(1);
    } else {
      const auto& tb = std::get<TransformerBlock>(layers[i]);
      validate_block(tb, where);
      if (tb.d_model != features) {
        throw GraphError(where + ": d_model " + std::to_string(tb.d_model) + " does not accept " +
                         std::to_string(features) + " input features");
      }
    }
  }
}

void CalibrationBatch::validate() const {
  if (inputs.rank() < 2) throw ArgumentError("batch inputs must be [b, m] or [b, s, d]");
  if (inputs.dim(0) == 0) throw ArgumentError("batch is empty");
  if (!inputs.all_finite()) throw ValueError("batch contains non-finite values");
}

bool QuantizedModel::has_biases() const {
  return std::any_of(sites.begin(), sites.end(), [](const auto& s) { return s.bias.has_value(); });
}

QuantizedModel QuantizedModel::without_biases() const {
  QuantizedModel m = *this;
  for (auto& s : m.sites) s.bias.reset();
  m.sequence_length = 0;
  return m;
}

std::vector<Shape> site_output_shapes(const ModelSpec& spec, const Shape& input_shape) {
  std::vector<Shape> shapes;
  const bool seq = input_shape.size() == 3;
  const std::size_t b = input_shape.at(0);
  const std::size_t s = seq ? input_shape[1] : 0;
  for (const Block& block : spec.layers) {
    if (const auto* lin = std::get_if<LinearBlock>(&block)) {
      const std::size_t n = lin->weight.dim(1);
      shapes.push_back(seq ? Shape{b, s, n} : Shape{b, n});
      continue;
    }
    const auto& tb = std::get<TransformerBlock>(block);
    const std::size_t d = tb.d_model, h = tb.n_heads, dk = d / h;
    shapes.push_back({b, s, d});
    shapes.push_back({b, s, d});
    shapes.push_back({b, s, d});
    shapes.push_back({b, h * s, s});
    shapes.push_back({b, h * s, dk});
    shapes.push_back({b, s, d});
    shapes.push_back({b, s, tb.d_ff});
    shapes.push_back({b, s, d});
  }
  return shapes;
}

void QuantizedModel::validate() const {
  spec.validate();
  const auto infos = spec.sites();
  if (sites.size() != infos.size()) {
    throw ValidationError("sites: expected " + std::to_string(infos.size()) + " entries, got " +
                          std::to_string(sites.size()));
  }
  std::vector<Shape> shapes;
  if (has_biases()) {
    const bool seq = spec.expects_sequence();
    if (seq && sequence_length == 0) {
      throw ValidationError("sequence_length: required when biases are attached");
    }
    shapes = seq ? site_output_shapes(spec, {1, sequence_length, spec.input_features()})
                 : site_output_shapes(spec, {1, spec.input_features()});
  }
  for (std::size_t i = 0; i < infos.size(); ++i) {
    const auto& info = infos[i];
    const auto& sq = sites[i];
    const std::string where = "sites[" + info.name + "]";
    if (info.kind == SiteKind::kLinear) {
      if (!sq.weight_config || !sq.weight) throw ValidationError(where + ".weight: missing");
      sq.weight->validate();
      if (!(sq.weight->config == *sq.weight_config)) {
        throw ValidationError(where + ".weight_config: does not match quantized weight");
      }
      if (sq.weight->shape != spec.site_weight(info).shape()) {
        throw ValidationError(where + ".weight: shape does not match float weight");
      }
    } else if (sq.weight_config || sq.weight) {
      throw ValidationError(where + ".weight: BMM sites have no weight operand");
    }
    const bool wants_act = mode == QuantMode::kWeightActivation;
    if (wants_act != sq.activation_config.has_value()) {
      throw ValidationError(where + ".activation_config: must be present exactly in " +
                            "weight-activation mode");
    }
    if (sq.activation_config) sq.activation_config->validate();
    if (sq.bias) {
      sq.bias->validate();
      if (sq.bias->size() != shape_numel(shapes[i])) {
        throw ValidationError(where + ".bias: length " + std::to_string(sq.bias->size()) +
                              " does not match site output " + shape_to_string(shapes[i]));
      }
    }
  }
}

QuantizedModel quantize_model(const ModelSpec& spec, QuantMode mode,
                              const QuantConfig& weight_config,
                              const QuantConfig& activation_config) {
  spec.validate();
  QuantConfig wcfg = weight_config;
  if (wcfg.granularity == Granularity::kPerChannel) wcfg.axis = 1;
  QuantConfig acfg = activation_config;
  acfg.granularity = Granularity::kPerTensor;

  QuantizedModel model;
  model.spec = spec;
  model.mode = mode;
  for (const auto& info : spec.sites()) {
    SiteQuantization sq;
    if (info.kind == SiteKind::kLinear) {
      const Tensor& w = spec.site_weight(info);
      try {
        sq.weight = quantize(w, wcfg);
      } catch (const ConfigError& e) {
        throw ConfigError(info.name + ": " + e.what());
      }
      sq.weight_config = wcfg;
    }
    if (mode == QuantMode::kWeightActivation) sq.activation_config = acfg;
    model.sites.push_back(std::move(sq));
  }
  return model;
}

namespace detail {

namespace {

void layer_norm_rows(Tensor& x, const Tensor& gamma, const Tensor& beta) {
  constexpr double kEps = 1e-5;
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  auto data = x.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = data.data() + r * d;
    double mean = 0.0;
    for (std::size_t k = 0; k < d; ++k) mean += row[k];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t k = 0; k < d; ++k) var += (row[k] - mean) * (row[k] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kEps);
    for (std::size_t k = 0; k < d; ++k) row[k] = (row[k] - mean) * inv * gamma[k] + beta[k];
  }
}

void softmax_rows(Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto data = x.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = data.data() + r * n;
    const double m = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      row[k] = std::exp(row[k] - m);
      sum += row[k];
    }
    for (std::size_t k = 0; k < n; ++k) row[k] /= sum;
  }
}

void activate(Tensor& x, Activation activation) {
  switch (activation) {
    case Activation::kNone: return;
    case Activation::kRelu:
      for (double& v : x.mutable_data()) v = std::max(v, 0.0);
      return;
    case Activation::kGelu:
      for (double& v : x.mutable_data()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
      return;
  }
}

void add_feature_bias(Tensor& x, const Tensor& bias) {
  const std::size_t n = bias.numel();
  auto data = x.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) data[i] += bias[i % n];
}

// [b, s, h*dk] -> [b*h, s, dk]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2), dk = d / heads;
  Tensor out({b * heads, s, dk});
  auto o = out.mutable_data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = 0; t < s; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t e = 0; e < dk; ++e)
          o[((bi * heads + h) * s + t) * dk + e] = x.at(bi, t, h * dk + e);
  return out;
}

// [b*h, s, dk] -> [b, s, h*dk]
Tensor merge_heads(const Tensor& x, std::size_t heads) {
  const std::size_t bh = x.dim(0), s = x.dim(1), dk = x.dim(2), b = bh / heads;
  Tensor out({b, s, heads * dk});
  auto o = out.mutable_data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < s; ++t)
        for (std::size_t e = 0; e < dk; ++e)
          o[(bi * s + t) * heads * dk + h * dk + e] = x.at(bi * heads + h, t, e);
  return out;
}

Tensor run_transformer(const TransformerBlock& tb, const Tensor& input, std::size_t first_site,
                       SiteExecutor& ex) {
  const std::size_t b = input.dim(0), s = input.dim(1), heads = tb.n_heads;
  const std::size_t dk = tb.d_model / heads;

  auto project = [&](std::size_t slot, const Tensor& x, const Tensor& w, const Tensor& bias) {
    Tensor y = ex.linear(first_site + slot, x, w);
    add_feature_bias(y, bias);
    ex.finish(first_site + slot, y);
    return y;
  };

  Tensor h = input;
  if (tb.layernorm) layer_norm_rows(h, tb.ln1_gamma, tb.ln1_beta);
  const Tensor q = project(0, h, tb.wq, tb.bq);
  const Tensor k = project(1, h, tb.wk, tb.bk);
  const Tensor v = project(2, h, tb.wv, tb.bv);

  Tensor scores = ex.bmm(first_site + 3, split_heads(q, heads), transpose_last(split_heads(k, heads)))
                      .reshaped({b, heads * s, s});
  ex.finish(first_site + 3, scores);
  scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(dk)));
  softmax_rows(scores);

  Tensor context = ex.bmm(first_site + 4, scores.reshaped({b * heads, s, s}), split_heads(v, heads))
                       .reshaped({b, heads * s, dk});
  ex.finish(first_site + 4, context);
  const Tensor merged = merge_heads(context.reshaped({b * heads, s, dk}), heads);

  Tensor x = add(input, project(5, merged, tb.wo, tb.bo));
  Tensor h2 = x;
  if (tb.layernorm) layer_norm_rows(h2, tb.ln2_gamma, tb.ln2_beta);
  Tensor f = project(6, h2, tb.w1, tb.b1);
  activate(f, Activation::kGelu);
  return add(x, project(7, f, tb.w2, tb.b2));
}

}  // namespace

Tensor run_graph(const ModelSpec& spec, const Tensor& input, SiteExecutor& executor) {
  Tensor x = input;
  std::size_t site = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::string where = "layer" + std::to_string(i);
    if (const auto* lin = std::get_if<LinearBlock>(&spec.layers[i])) {
      if (x.shape().back() != lin->weight.dim(0)) {
        throw GraphError(where + ".linear: input " + shape_to_string(x.shape()) +
                         " does not match weight " + shape_to_string(lin->weight.shape()));
      }
      x = executor.linear(site, x, lin->weight);
      if (lin->bias) add_feature_bias(x, *lin->bias);
      executor.finish(site, x);
      activate(x, lin->activation);
      ++site;
    } else {
      const auto& tb = std::get<TransformerBlock>(spec.layers[i]);
      if (x.rank() != 3 || x.dim(2) != tb.d_model) {
        throw GraphError(where + ".q_proj: transformer input must be [b, s, " +
                         std::to_string(tb.d_model) + "], got " + shape_to_string(x.shape()));
      }
      x = run_transformer(tb, x, site, executor);
      site += kSitesPerTransformerBlock;
    }
  }
  return x;
}

}  // namespace detail

namespace {

class FloatExecutor : public detail::SiteExecutor {
 public:
  explicit FloatExecutor(bool record) : record_(record) {}

  Tensor linear(std::size_t, const Tensor& x, const Tensor& w) override {
    return matmul_last_axis(x, w);
  }
  Tensor bmm(std::size_t, const Tensor& a, const Tensor& c) override {
    return batched_matmul(a, c);
  }
  void finish(std::size_t, Tensor& output) override {
    if (record_) outputs.push_back(output);
  }

  std::vector<Tensor> outputs;

 private:
  bool record_;
};

class QuantizedExecutor : public detail::SiteExecutor {
 public:
  QuantizedExecutor(const QuantizedModel& model, bool record) : model_(model), record_(record) {
    infos_ = model.spec.sites();
    weights_.resize(infos_.size());
    for (std::size_t i = 0; i < infos_.size(); ++i) {
      const auto& sq = model.sites[i];
      if (infos_[i].kind == SiteKind::kLinear) {
        if (!sq.weight) throw ConfigError(infos_[i].name + ": no quantized weight configured");
        weights_[i] = dequantize(*sq.weight);
      }
      if (model.mode == QuantMode::kWeightActivation && !sq.activation_config) {
        throw ConfigError(infos_[i].name + ": no activation config in weight-activation mode");
      }
    }
  }

  Tensor linear(std::size_t site, const Tensor& x, const Tensor&) override {
    return matmul_last_axis(maybe_quantize(site, x), weights_[site]);
  }
  Tensor bmm(std::size_t site, const Tensor& a, const Tensor& c) override {
    return batched_matmul(maybe_quantize(site, a), maybe_quantize(site, c));
  }
  void finish(std::size_t site, Tensor& output) override {
    if (record_) raw_outputs.push_back(output);
    if (const auto& bias = model_.sites[site].bias) {
      try {
        output = apply_bias(output, *bias);
      } catch (const DimensionError& e) {
        throw GraphError(infos_[site].name + ": " + e.what());
      }
    }
    if (record_) outputs.push_back(output);
  }

  std::vector<Tensor> raw_outputs;
  std::vector<Tensor> outputs;

 private:
  Tensor maybe_quantize(std::size_t site, const Tensor& x) const {
    const auto& cfg = model_.sites[site].activation_config;
    return cfg ? fake_quantize(x, *cfg) : x;
  }

  const QuantizedModel& model_;
  bool record_;
  std::vector<SiteInfo> infos_;
  std::vector<Tensor> weights_;
};

}  // namespace

ForwardResult forward_float(const ModelSpec& spec, const CalibrationBatch& batch, bool record) {
  batch.validate();
  FloatExecutor ex(record);
  ForwardResult r;
  r.output = detail::run_graph(spec, batch.inputs, ex);
  r.site_outputs = std::move(ex.outputs);
  return r;
}

ForwardResult forward_quantized(const QuantizedModel& model, const CalibrationBatch& batch,
                                bool record) {
  batch.validate();
  if (model.sites.size() != model.spec.sites().size()) {
    throw ConfigError("quantized model does not configure every site");
  }
  QuantizedExecutor ex(model, record);
  ForwardResult r;
  r.output = detail::run_graph(model.spec, batch.inputs, ex);
  r.site_outputs = std::move(ex.outputs);
  r.raw_site_outputs = std::move(ex.raw_outputs);
  return r;
}

}  // namespace qbc
