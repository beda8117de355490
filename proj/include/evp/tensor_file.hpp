#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace evp {

// A named float64 array with an explicit shape.
struct NamedArray {
  std::vector<std::int64_t> shape;
  std::vector<double> values;

  bool operator==(const NamedArray&) const = default;
};

// In-memory form of a safetensors container: named F64 arrays plus a
// string-to-string metadata block. Arrays are written in name order so the
// byte stream is a pure function of the contents.
struct TensorFile {
  std::map<std::string, NamedArray> arrays;
  std::map<std::string, std::string> metadata;

  const NamedArray& require(const std::string& name) const;
  const std::string& require_meta(const std::string& key) const;
  bool operator==(const TensorFile&) const = default;
};

std::string serialize_tensor_file(const TensorFile& file);
TensorFile parse_tensor_file(const std::string& bytes);

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

// FNV-1a 64-bit over names, shapes and raw value bytes in name order.
std::uint64_t content_checksum(const std::map<std::string, NamedArray>& arrays);
std::string checksum_hex(std::uint64_t checksum);

}  // namespace evp
