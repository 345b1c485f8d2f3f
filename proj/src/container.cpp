#include "qbc/container.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <optional>

#include "qbc/errors.hpp"

namespace qbc {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

DType parse_dtype(const std::string& text) {
  if (text == "f64") return DType::kF64;
  if (text == "f32") return DType::kF32;
  if (text == "i32") return DType::kI32;
  throw ValidationError("tensors[].dtype: unknown element type '" + text + "'");
}

std::size_t align8(std::size_t n) { return (n + 7) & ~std::size_t{7}; }

std::optional<std::uint64_t> checked_numel(const Shape& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) return std::nullopt;
    n *= d;
  }
  return n;
}

}  // namespace

std::string to_string(DType dtype) {
  switch (dtype) {
    case DType::kF64: return "f64";
    case DType::kF32: return "f32";
    case DType::kI32: return "i32";
  }
  return "?";
}

std::size_t dtype_size(DType dtype) { return dtype == DType::kF64 ? 8 : 4; }

void Container::add(ContainerEntry entry) {
  if (contains(entry.name)) throw ArgumentError("duplicate container entry '" + entry.name + "'");
  entries_.push_back(std::move(entry));
}

void Container::add_f64(const std::string& name, const Tensor& t) {
  ContainerEntry e{name, DType::kF64, t.shape(), {}, nlohmann::json::object()};
  e.bytes.reserve(t.numel() * 8);
  for (double v : t.data()) put_le(e.bytes, v);
  add(std::move(e));
}

void Container::add_f32(const std::string& name, const Tensor& t) {
  ContainerEntry e{name, DType::kF32, t.shape(), {}, nlohmann::json::object()};
  e.bytes.reserve(t.numel() * 4);
  for (double v : t.data()) put_le(e.bytes, static_cast<float>(v));
  add(std::move(e));
}

void Container::add_i32(const std::string& name, const Shape& shape,
                        std::span<const std::int32_t> values) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("entry '" + name + "': " + std::to_string(values.size()) +
                         " values for shape " + shape_to_string(shape));
  }
  ContainerEntry e{name, DType::kI32, shape, {}, nlohmann::json::object()};
  e.bytes.reserve(values.size() * 4);
  for (auto v : values) put_le(e.bytes, v);
  add(std::move(e));
}

bool Container::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const ContainerEntry& e) { return e.name == name; });
}

const ContainerEntry& Container::entry(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw ValidationError("tensors: missing entry '" + name + "'");
}

Tensor Container::get_tensor(const std::string& name) const {
  const ContainerEntry& e = entry(name);
  const std::size_t n = shape_numel(e.shape);
  std::vector<double> values(n);
  if (e.dtype == DType::kF64) {
    for (std::size_t i = 0; i < n; ++i) values[i] = get_le<double>(e.bytes.data() + 8 * i);
  } else if (e.dtype == DType::kF32) {
    for (std::size_t i = 0; i < n; ++i) values[i] = get_le<float>(e.bytes.data() + 4 * i);
  } else {
    throw ValidationError("tensors[" + name + "].dtype: expected a floating-point tensor");
  }
  if (e.shape.empty() || e.shape.size() > 3) {
    throw ValidationError("tensors[" + name + "].shape: rank must be 1..3");
  }
  Tensor t(e.shape, std::move(values));
  if (!t.all_finite()) throw ValidationError("tensors[" + name + "]: non-finite value");
  return t;
}

std::vector<std::int32_t> Container::get_i32(const std::string& name) const {
  const ContainerEntry& e = entry(name);
  if (e.dtype != DType::kI32) {
    throw ValidationError("tensors[" + name + "].dtype: expected i32");
  }
  const std::size_t n = shape_numel(e.shape);
  std::vector<std::int32_t> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = get_le<std::int32_t>(e.bytes.data() + 4 * i);
  return values;
}

std::vector<std::uint8_t> Container::serialize() const {
  nlohmann::json head = header;
  if (!head.is_object()) head = nlohmann::json::object();
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : entries_) {
    nlohmann::json d = e.extra.is_object() ? e.extra : nlohmann::json::object();
    d["name"] = e.name;
    d["dtype"] = to_string(e.dtype);
    d["shape"] = e.shape;
    d["offset"] = offset;
    d["length"] = e.bytes.size();
    tensors.push_back(std::move(d));
    offset = align8(offset + e.bytes.size());
  }
  head["tensors"] = std::move(tensors);

  std::string text = head.dump();
  const std::size_t prefix = 4 + 4 + 8;
  text.append(align8(prefix + text.size()) - (prefix + text.size()), ' ');

  std::vector<std::uint8_t> out;
  out.reserve(prefix + text.size() + offset);
  out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
  put_le(out, kContainerVersion);
  put_le(out, static_cast<std::uint64_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload_start = out.size();
  for (const auto& e : entries_) {
    out.resize(align8(out.size() - payload_start) + payload_start, 0);
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  }
  out.resize(payload_start + offset, 0);
  return out;
}

Container Container::parse(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t prefix = 4 + 4 + 8;
  if (bytes.size() < prefix) throw IoError("truncated container: missing fixed header");
  if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0) throw FormatError("bad magic");
  const auto version = get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - prefix) throw IoError("truncated container: header");

  nlohmann::json head;
  try {
    head = nlohmann::json::parse(bytes.begin() + prefix,
                                 bytes.begin() + prefix + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("header is not valid JSON: ") + e.what());
  }
  if (!head.is_object()) throw FormatError("header must be a JSON object");
  if (!head.contains("tensors") || !head["tensors"].is_array()) {
    throw ValidationError("tensors: missing or not an array");
  }

  const std::span<const std::uint8_t> payload = bytes.subspan(prefix + header_len);
  Container c;
  struct Range {
    std::size_t begin, end;
    std::string name;
  };
  std::vector<Range> ranges;
  for (const auto& d : head["tensors"]) {
    if (!d.is_object()) throw ValidationError("tensors[]: descriptor must be an object");
    auto field = [&](const char* key) -> const nlohmann::json& {
      if (!d.contains(key)) throw ValidationError(std::string("tensors[].") + key + ": missing");
      return d[key];
    };
    ContainerEntry e;
    if (!field("name").is_string()) throw ValidationError("tensors[].name: must be a string");
    e.name = d["name"].get<std::string>();
    const std::string where = "tensors[" + e.name + "]";
    if (!field("dtype").is_string()) throw ValidationError(where + ".dtype: must be a string");
    e.dtype = parse_dtype(d["dtype"].get<std::string>());
    if (!field("shape").is_array() || d["shape"].empty() || d["shape"].size() > 3) {
      throw ValidationError(where + ".shape: must be an array of 1..3 lengths");
    }
    for (const auto& s : d["shape"]) {
      if (!s.is_number_unsigned()) throw ValidationError(where + ".shape: lengths must be unsigned");
      e.shape.push_back(s.get<std::size_t>());
    }
    if (!field("offset").is_number_unsigned() || !field("length").is_number_unsigned()) {
      throw ValidationError(where + ".offset/length: must be unsigned integers");
    }
    const auto offset = d["offset"].get<std::uint64_t>();
    const auto length = d["length"].get<std::uint64_t>();
    const auto numel = checked_numel(e.shape);
    if (!numel || *numel > std::numeric_limits<std::uint64_t>::max() / dtype_size(e.dtype) ||
        length != *numel * dtype_size(e.dtype)) {
      throw ValidationError(where + ".length: does not equal element count x element size");
    }
    if (offset % 8 != 0) throw ValidationError(where + ".offset: not 8-byte aligned");
    if (offset > payload.size() || length > payload.size() - offset) {
      throw IoError("truncated payload: " + where + " extends past end of file");
    }
    if (c.contains(e.name)) throw ValidationError(where + ".name: duplicate");
    e.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                   payload.begin() + static_cast<std::ptrdiff_t>(offset + length));
    for (auto it = d.begin(); it != d.end(); ++it) {
      static const char* known[] = {"name", "dtype", "shape", "offset", "length"};
      if (std::find_if(std::begin(known), std::end(known),
                       [&](const char* k) { return it.key() == k; }) == std::end(known)) {
        e.extra[it.key()] = it.value();
      }
    }
    ranges.push_back({static_cast<std::size_t>(offset), static_cast<std::size_t>(offset + length),
                      e.name});
    c.entries_.push_back(std::move(e));
  }

  std::sort(ranges.begin(), ranges.end(),
            [](const Range& a, const Range& b) { return a.begin < b.begin; });
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].begin < ranges[i - 1].end) {
      throw ValidationError("tensors[" + ranges[i].name + "].offset: overlaps tensors[" +
                            ranges[i - 1].name + "]");
    }
  }

  head.erase("tensors");
  c.header = std::move(head);
  return c;
}

void Container::write_file(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Container Container::read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse(bytes);
}

}  // namespace qbc
