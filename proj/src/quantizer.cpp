#include "qbc/quantizer.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <limits>

#include "qbc/errors.hpp"

namespace qbc {

std::string to_string(Scheme scheme) {
  return scheme == Scheme::kSymmetric ? "symmetric" : "asymmetric";
}

std::string to_string(Granularity granularity) {
  switch (granularity) {
    case Granularity::kPerTensor: return "per-tensor";
    case Granularity::kPerChannel: return "per-channel";
    case Granularity::kPerGroup: return "per-group";
  }
  return "?";
}

Scheme parse_scheme(const std::string& text) {
  if (text == "symmetric") return Scheme::kSymmetric;
  if (text == "asymmetric") return Scheme::kAsymmetric;
  throw ConfigError("unknown scheme '" + text + "'");
}

Granularity parse_granularity(const std::string& text) {
  if (text == "per-tensor") return Granularity::kPerTensor;
  if (text == "per-channel") return Granularity::kPerChannel;
  if (text == "per-group") return Granularity::kPerGroup;
  throw ConfigError("unknown granularity '" + text + "'");
}

QuantConfig QuantConfig::per_tensor(int bits, Scheme scheme) {
  QuantConfig c;
  c.bits = bits;
  c.scheme = scheme;
  return c;
}

QuantConfig QuantConfig::per_channel(int bits, std::size_t axis, Scheme scheme) {
  QuantConfig c = per_tensor(bits, scheme);
  c.granularity = Granularity::kPerChannel;
  c.axis = axis;
  return c;
}

QuantConfig QuantConfig::per_group(int bits, std::size_t group_size, Scheme scheme) {
  QuantConfig c = per_tensor(bits, scheme);
  c.granularity = Granularity::kPerGroup;
  c.group_size = group_size;
  return c;
}

std::int32_t QuantConfig::code_min() const {
  return scheme == Scheme::kSymmetric ? -((1 << (bits - 1)) - 1) : 0;
}

std::int32_t QuantConfig::code_max() const {
  return scheme == Scheme::kSymmetric ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
}

void QuantConfig::validate() const {
  if (bits < 2 || bits > 8) throw ConfigError("bits must be in [2, 8], got " + std::to_string(bits));
  if (granularity == Granularity::kPerGroup && group_size == 0) {
    throw ConfigError("group size must be positive");
  }
}

void QuantConfig::validate_for(const Shape& shape) const {
  validate();
  if (granularity == Granularity::kPerChannel && axis >= shape.size()) {
    throw ConfigError("per-channel axis " + std::to_string(axis) + " out of range for " +
                      shape_to_string(shape));
  }
  if (granularity == Granularity::kPerGroup && shape.back() % group_size != 0) {
    throw ConfigError("group size " + std::to_string(group_size) +
                      " does not divide last axis of " + shape_to_string(shape));
  }
}

std::size_t QuantConfig::unit_count(const Shape& shape) const {
  switch (granularity) {
    case Granularity::kPerTensor: return 1;
    case Granularity::kPerChannel: return shape.at(axis);
    case Granularity::kPerGroup: return shape_numel(shape) / group_size;
  }
  return 1;
}

std::string QuantConfig::describe() const {
  std::string s = std::to_string(bits) + "-bit " + to_string(scheme) + " " + to_string(granularity);
  if (granularity == Granularity::kPerChannel) s += "(axis=" + std::to_string(axis) + ")";
  if (granularity == Granularity::kPerGroup) s += "(" + std::to_string(group_size) + ")";
  return s;
}

namespace {

struct UnitMapper {
  Granularity granularity;
  std::size_t stride = 1;  // per-channel: elements per step along axis
  std::size_t extent = 1;  // per-channel: length of axis
  std::size_t group = 1;   // per-group

  UnitMapper(const Shape& shape, const QuantConfig& cfg) : granularity(cfg.granularity) {
    if (granularity == Granularity::kPerChannel) {
      extent = shape[cfg.axis];
      for (std::size_t a = cfg.axis + 1; a < shape.size(); ++a) stride *= shape[a];
    } else if (granularity == Granularity::kPerGroup) {
      group = cfg.group_size;
    }
  }

  std::size_t operator()(std::size_t index) const {
    switch (granularity) {
      case Granularity::kPerTensor: return 0;
      case Granularity::kPerChannel: return (index / stride) % extent;
      // Groups are contiguous runs along the last axis and the last axis is
      // a multiple of the group size, so flat index / group is the unit.
      case Granularity::kPerGroup: return index / group;
    }
    return 0;
  }
};

struct UnitParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  bool operator==(const UnitParams&) const = default;
};

std::int32_t to_code(double x, const UnitParams& p, const QuantConfig& cfg) {
  const double q = round_ties_even(x / p.scale) + p.zero_point;
  return static_cast<std::int32_t>(
      std::clamp(q, static_cast<double>(cfg.code_min()), static_cast<double>(cfg.code_max())));
}

double from_code(std::int32_t code, const UnitParams& p) {
  return static_cast<double>(code - p.zero_point) * p.scale;
}

// Plain min/max calibration. Asymmetric ranges are widened to contain zero
// so that zero is exactly representable.
double fit_scale(double lo, double hi, const QuantConfig& cfg) {
  if (cfg.scheme == Scheme::kSymmetric) {
    const double m = std::max(std::abs(lo), std::abs(hi));
    return m == 0.0 ? 1.0 : m / cfg.code_max();
  }
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  return hi == lo ? 1.0 : (hi - lo) / cfg.code_max();
}

std::int32_t fit_zero_point(double lo, double scale, const QuantConfig& cfg) {
  if (cfg.scheme == Scheme::kSymmetric) return 0;
  lo = std::min(lo, 0.0);
  const double z = round_ties_even(-lo / scale);
  return static_cast<std::int32_t>(std::clamp(z, 0.0, static_cast<double>(cfg.code_max())));
}

UnitParams fit(double lo, double hi, const QuantConfig& cfg) {
  UnitParams p;
  p.scale = fit_scale(lo, hi, cfg);
  p.zero_point = fit_zero_point(lo, p.scale, cfg);
  return p;
}

// Fits one unit so that re-fitting its own dequantized values reproduces the
// same parameters bit for bit. Floating-point rounding in range/qmax can
// move the scale by an ulp; nearby scales are tried until one is a fixed
// point.
UnitParams fit_unit(const std::vector<double>& values, const QuantConfig& cfg) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const UnitParams initial = fit(lo, hi, cfg);

  auto is_fixed_point = [&](const UnitParams& p) {
    double dlo = std::numeric_limits<double>::infinity();
    double dhi = -dlo;
    for (double v : values) {
      const double d = from_code(to_code(v, p, cfg), p);
      dlo = std::min(dlo, d);
      dhi = std::max(dhi, d);
    }
    return fit(dlo, dhi, cfg) == p;
  };

  if (is_fixed_point(initial)) return initial;
  double up = initial.scale;
  double down = initial.scale;
  for (int step = 0; step < 64; ++step) {
    up = std::nextafter(up, std::numeric_limits<double>::infinity());
    down = std::nextafter(down, 0.0);
    for (double s : {up, down}) {
      UnitParams p{s, fit_zero_point(lo, s, cfg)};
      if (is_fixed_point(p)) return p;
    }
  }
  return initial;
}

}  // namespace

double round_ties_even(double x) {
  // The default floating-point environment rounds to nearest, ties to even.
  return std::nearbyint(x);
}

std::size_t QuantizedTensor::unit_of(std::size_t index) const {
  return UnitMapper(shape, config)(index);
}

void QuantizedTensor::validate() const {
  if (shape.empty() || shape.size() > 3) throw ValidationError("shape: rank must be 1..3");
  try {
    config.validate_for(shape);
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  if (codes.size() != shape_numel(shape)) throw ValidationError("codes: length mismatch");
  const std::size_t units = config.unit_count(shape);
  if (scales.size() != units) throw ValidationError("scales: expected " + std::to_string(units));
  for (double s : scales) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("scales: must be positive and finite");
  }
  const std::int32_t lo = config.code_min(), hi = config.code_max();
  for (auto c : codes) {
    if (c < lo || c > hi) throw ValidationError("codes: value out of representable range");
  }
  if (config.scheme == Scheme::kAsymmetric) {
    if (zero_points.size() != units) throw ValidationError("zero_points: expected one per unit");
    for (auto z : zero_points) {
      if (z < lo || z > hi) throw ValidationError("zero_points: out of range");
    }
  } else if (!zero_points.empty()) {
    throw ValidationError("zero_points: must be empty for symmetric quantization");
  }
}

QuantizedTensor quantize(const Tensor& t, const QuantConfig& cfg) {
  cfg.validate_for(t.shape());
  if (!t.all_finite()) throw ValueError("cannot quantize a tensor with non-finite values");

  const UnitMapper unit(t.shape(), cfg);
  const std::size_t units = cfg.unit_count(t.shape());
  std::vector<std::vector<double>> members(units);
  for (std::size_t i = 0; i < t.numel(); ++i) members[unit(i)].push_back(t[i]);

  std::vector<UnitParams> params(units);
  for (std::size_t u = 0; u < units; ++u) params[u] = fit_unit(members[u], cfg);

  QuantizedTensor q;
  q.shape = t.shape();
  q.config = cfg;
  q.codes.resize(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) q.codes[i] = to_code(t[i], params[unit(i)], cfg);
  q.scales.reserve(units);
  for (const auto& p : params) q.scales.push_back(p.scale);
  if (cfg.scheme == Scheme::kAsymmetric) {
    for (const auto& p : params) q.zero_points.push_back(p.zero_point);
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  const UnitMapper unit(q.shape, q.config);
  Tensor out(q.shape);
  auto o = out.mutable_data();
  const bool asym = q.config.scheme == Scheme::kAsymmetric;
  for (std::size_t i = 0; i < o.size(); ++i) {
    const std::size_t u = unit(i);
    o[i] = from_code(q.codes[i], UnitParams{q.scales[u], asym ? q.zero_points[u] : 0});
  }
  return out;
}

Tensor fake_quantize(const Tensor& t, const QuantConfig& cfg) {
  return dequantize(quantize(t, cfg));
}

Tensor quant_matmul(const Tensor& x, const Tensor& w, const std::optional<QuantConfig>& cfg_x,
                    const QuantConfig& cfg_w) {
  const Tensor wq = fake_quantize(w, cfg_w);
  if (!cfg_x) return matmul_last_axis(x, wq);
  return matmul_last_axis(fake_quantize(x, *cfg_x), wq);
}

NoiseMatrices noise_matrices(const Tensor& x, const Tensor& w,
                             const std::optional<QuantConfig>& cfg_x, const QuantConfig& cfg_w) {
  NoiseMatrices n;
  n.weight = subtract(w, fake_quantize(w, cfg_w));
  n.input = cfg_x ? subtract(x, fake_quantize(x, *cfg_x)) : Tensor(x.shape());
  return n;
}

}  // namespace qbc
