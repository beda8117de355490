#include "evp/tensor_file.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "evp/errors.hpp"

namespace evp {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian on disk");

namespace {

using json = nlohmann::json;

std::size_t element_count(const std::vector<std::int64_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw Error(ErrorKind::kShape, "negative dimension in array shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= bytes[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace

const NamedArray& TensorFile::require(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw Error(ErrorKind::kConfig, "missing array '" + name + "'");
  return it->second;
}

const std::string& TensorFile::require_meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw Error(ErrorKind::kConfig, "missing metadata '" + key + "'");
  return it->second;
}

std::string serialize_tensor_file(const TensorFile& file) {
  json header = json::object();
  std::size_t offset = 0;
  for (const auto& [name, array] : file.arrays) {
    if (name == "__metadata__") throw Error(ErrorKind::kConfig, "reserved array name");
    const std::size_t n = element_count(array.shape);
    if (n != array.values.size()) {
      throw Error(ErrorKind::kShape, "array '" + name + "' does not match its shape");
    }
    const std::size_t bytes = n * sizeof(double);
    header[name] = {{"dtype", "F64"}, {"shape", array.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!file.metadata.empty()) header["__metadata__"] = file.metadata;

  std::string header_text = header.dump();
  // Data section starts on an 8-byte boundary.
  while ((header_text.size() % 8) != 0) header_text.push_back(' ');

  std::string out;
  out.reserve(8 + header_text.size() + offset);
  const std::uint64_t header_len = header_text.size();
  out.append(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out += header_text;
  for (const auto& [name, array] : file.arrays) {
    out.append(reinterpret_cast<const char*>(array.values.data()),
               array.values.size() * sizeof(double));
  }
  return out;
}

TensorFile parse_tensor_file(const std::string& bytes) {
  if (bytes.size() < 8) throw Error(ErrorKind::kIo, "tensor file truncated");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), sizeof(header_len));
  if (header_len > bytes.size() - 8) throw Error(ErrorKind::kIo, "tensor file header truncated");

  json header;
  try {
    header = json::parse(bytes.substr(8, header_len));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kIo, std::string("malformed tensor file header: ") + e.what());
  }
  const std::size_t data_start = 8 + header_len;
  const std::size_t data_size = bytes.size() - data_start;

  TensorFile file;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      file.metadata = entry.get<std::map<std::string, std::string>>();
      continue;
    }
    if (entry.at("dtype").get<std::string>() != "F64") {
      throw Error(ErrorKind::kIo, "array '" + name + "' is not F64");
    }
    NamedArray array;
    array.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
    const std::size_t n = element_count(array.shape);
    if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > data_size ||
        offsets[1] - offsets[0] != n * sizeof(double)) {
      throw Error(ErrorKind::kIo, "array '" + name + "' has inconsistent offsets");
    }
    array.values.resize(n);
    std::memcpy(array.values.data(), bytes.data() + data_start + offsets[0], n * sizeof(double));
    file.arrays.emplace(name, std::move(array));
  }
  return file;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  const std::string bytes = serialize_tensor_file(file);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kIo, "failed writing '" + path.string() + "'");
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_tensor_file(ss.str());
}

std::uint64_t content_checksum(const std::map<std::string, NamedArray>& arrays) {
  Fnv1a h;
  for (const auto& [name, array] : arrays) {
    h.update(name.data(), name.size());
    h.update(array.shape.data(), array.shape.size() * sizeof(std::int64_t));
    h.update(array.values.data(), array.values.size() * sizeof(double));
  }
  return h.value();
}

std::string checksum_hex(std::uint64_t checksum) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(checksum));
  return buf;
}

}  // namespace evp
