#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "qbc/tensor.hpp"

namespace qbc {

// Binary layout, all integers little-endian:
//
//   "QBCM" | u32 version | u64 header_len | header (UTF-8 JSON) | payload
//
// The header is a JSON object whose "tensors" array lists
// {name, dtype, shape, offset, length}; offsets are relative to the start of
// the payload and 8-byte aligned. The header is space-padded so the payload
// itself starts on an 8-byte boundary. Every other header key is carried
// through read/write untouched.
inline constexpr char kContainerMagic[4] = {'Q', 'B', 'C', 'M'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType { kF64, kF32, kI32 };

std::string to_string(DType dtype);
std::size_t dtype_size(DType dtype);

struct ContainerEntry {
  std::string name;
  DType dtype = DType::kF64;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian element data
  nlohmann::json extra = nlohmann::json::object();  // unknown descriptor keys
};

class Container {
 public:
  // Header keys other than "tensors".
  nlohmann::json header = nlohmann::json::object();

  void add_f64(const std::string& name, const Tensor& t);
  void add_f32(const std::string& name, const Tensor& t);
  void add_i32(const std::string& name, const Shape& shape, std::span<const std::int32_t> values);

  bool contains(const std::string& name) const;
  const ContainerEntry& entry(const std::string& name) const;
  const std::vector<ContainerEntry>& entries() const noexcept { return entries_; }

  // f32 entries are widened to f64.
  Tensor get_tensor(const std::string& name) const;
  std::vector<std::int32_t> get_i32(const std::string& name) const;

  std::vector<std::uint8_t> serialize() const;
  // Throws FormatError (magic, version, header), IoError (truncation) or
  // ValidationError (descriptor invariants).
  static Container parse(std::span<const std::uint8_t> bytes);

  void write_file(const std::filesystem::path& path) const;
  static Container read_file(const std::filesystem::path& path);

 private:
  void add(ContainerEntry entry);
  std::vector<ContainerEntry> entries_;
};

}  // namespace qbc
