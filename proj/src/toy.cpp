#include "qbc/toy.hpp"

#include <cmath>
#include <sstream>

#include "qbc/errors.hpp"

namespace qbc {

namespace {

std::size_t parse_size(const std::string& text, const std::string& what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size() || v == 0) {
    throw ConfigError("invalid " + what + " '" + text + "' in arch descriptor");
  }
  return static_cast<std::size_t>(v);
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, sep)) parts.push_back(item);
  return parts;
}

Tensor gaussian_weight(RngStream& rng, std::size_t fan_in, std::size_t fan_out) {
  return rng.normal_tensor({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace

ArchDescriptor ArchDescriptor::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ConfigError("arch descriptor needs a 'kind:' prefix");
  const std::string kind = text.substr(0, colon);
  const std::string body = text.substr(colon + 1);
  ArchDescriptor a;
  if (kind == "mlp") {
    a.kind = Kind::kMlp;
    for (const auto& part : split(body, '-')) a.mlp_dims.push_back(parse_size(part, "layer width"));
    if (a.mlp_dims.size() < 2) throw ConfigError("mlp descriptor needs at least two widths");
    return a;
  }
  if (kind != "transformer") throw ConfigError("unknown architecture kind '" + kind + "'");
  a.kind = Kind::kTransformer;
  for (const auto& part : split(body, ',')) {
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + part + "'");
    const std::string key = part.substr(0, eq);
    const std::size_t value = parse_size(part.substr(eq + 1), key);
    if (key == "blocks") a.blocks = value;
    else if (key == "d") a.d_model = value;
    else if (key == "heads") a.n_heads = value;
    else if (key == "ff") a.d_ff = value;
    else if (key == "seq") a.seq = value;
    else throw ConfigError("unknown transformer key '" + key + "'");
  }
  if (a.d_model % a.n_heads != 0) throw ConfigError("d must be divisible by heads");
  return a;
}

std::string ArchDescriptor::to_string() const {
  std::ostringstream os;
  if (kind == Kind::kMlp) {
    os << "mlp:";
    for (std::size_t i = 0; i < mlp_dims.size(); ++i) os << (i ? "-" : "") << mlp_dims[i];
  } else {
    os << "transformer:blocks=" << blocks << ",d=" << d_model << ",heads=" << n_heads
       << ",ff=" << d_ff << ",seq=" << seq;
  }
  return os.str();
}

ModelSpec make_toy_model(const ArchDescriptor& arch, RngStream& rng) {
  ModelSpec spec;
  if (arch.kind == ArchDescriptor::Kind::kMlp) {
    for (std::size_t i = 0; i + 1 < arch.mlp_dims.size(); ++i) {
      LinearBlock lin;
      lin.weight = gaussian_weight(rng, arch.mlp_dims[i], arch.mlp_dims[i + 1]);
      lin.bias = rng.normal_tensor({arch.mlp_dims[i + 1]}, 0.02);
      lin.activation = i + 2 < arch.mlp_dims.size() ? Activation::kGelu : Activation::kNone;
      spec.layers.emplace_back(std::move(lin));
    }
    return spec;
  }
  const std::size_t d = arch.d_model, ff = arch.d_ff;
  for (std::size_t i = 0; i < arch.blocks; ++i) {
    TransformerBlock tb;
    tb.d_model = d;
    tb.n_heads = arch.n_heads;
    tb.d_ff = ff;
    tb.wq = gaussian_weight(rng, d, d);
    tb.wk = gaussian_weight(rng, d, d);
    tb.wv = gaussian_weight(rng, d, d);
    tb.wo = gaussian_weight(rng, d, d);
    tb.w1 = gaussian_weight(rng, d, ff);
    tb.w2 = gaussian_weight(rng, ff, d);
    tb.bq = rng.normal_tensor({d}, 0.02);
    tb.bk = rng.normal_tensor({d}, 0.02);
    tb.bv = rng.normal_tensor({d}, 0.02);
    tb.bo = rng.normal_tensor({d}, 0.02);
    tb.b1 = rng.normal_tensor({ff}, 0.02);
    tb.b2 = rng.normal_tensor({d}, 0.02);
    tb.layernorm = true;
    tb.ln1_gamma = Tensor({d}, std::vector<double>(d, 1.0));
    tb.ln2_gamma = Tensor({d}, std::vector<double>(d, 1.0));
    tb.ln1_beta = Tensor({d});
    tb.ln2_beta = Tensor({d});
    spec.layers.emplace_back(std::move(tb));
  }
  return spec;
}

CalibrationBatch make_toy_batch(const ArchDescriptor& arch, std::size_t batch_size,
                                RngStream& rng) {
  if (batch_size == 0) throw ArgumentError("batch size must be >= 1");
  if (arch.kind == ArchDescriptor::Kind::kMlp) {
    return {rng.normal_tensor({batch_size, arch.mlp_dims.front()})};
  }
  return {rng.normal_tensor({batch_size, arch.seq, arch.d_model})};
}

}  // namespace qbc
