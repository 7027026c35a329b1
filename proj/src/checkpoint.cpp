// spikeseg/checkpoint.cpp

#include "spikeseg/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "spikeseg/errors.hpp"

namespace spikeseg {

namespace {

constexpr const char* kFormat = "spikeseg-checkpoint";
constexpr int kVersion = 1;

void append_le64(std::string& out, std::uint64_t bits) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

std::uint64_t read_le64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return bits;
}

}  // namespace

ad::Tensor ParameterStore::add(const std::string& name, ad::Shape shape, std::vector<double> values) {
  if (contains(name)) throw ContractError("duplicate parameter name " + name);
  entries_.push_back({name, ad::Tensor::parameter(std::move(shape), std::move(values))});
  return entries_.back().tensor;
}

const ad::Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.tensor;
  }
  throw ContractError("unknown parameter " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const nlohmann::json& meta) {
  nlohmann::json header;
  header["format"] = kFormat;
  header["version"] = kVersion;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : params.entries()) {
    header["tensors"].push_back(
        {{"name", e.name}, {"shape", e.tensor.shape()}, {"offset", offset}, {"count", e.tensor.size()}});
    offset += 8 * e.tensor.size();
  }
  const std::string json = header.dump();

  std::string bytes;
  bytes.reserve(8 + json.size() + offset);
  append_le64(bytes, json.size());
  bytes += json;
  for (const auto& e : params.entries()) {
    for (double v : e.tensor.values()) append_le64(bytes, std::bit_cast<std::uint64_t>(v));
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8) throw ContractError(path.string() + " is not a checkpoint (truncated)");
  const std::uint64_t hlen = read_le64(raw);
  if (hlen > bytes.size() - 8) throw ContractError(path.string() + " is not a checkpoint (bad header length)");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, hlen));
  } catch (const nlohmann::json::parse_error&) {
    throw ContractError(path.string() + " is not a checkpoint (bad header)");
  }
  if (header.value("format", "") != kFormat) throw ContractError(path.string() + " is not a checkpoint");

  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  const std::size_t payload = 8 + hlen;
  for (const auto& t : header.at("tensors")) {
    CheckpointTensor ct;
    ct.name = t.at("name").get<std::string>();
    ct.shape = t.at("shape").get<ad::Shape>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto count = t.at("count").get<std::uint64_t>();
    if (count != ad::numel(ct.shape) || payload + offset + 8 * count > bytes.size()) {
      throw ContractError(path.string() + ": tensor " + ct.name + " out of bounds");
    }
    ct.values.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      ct.values[i] = std::bit_cast<double>(read_le64(raw + payload + offset + 8 * i));
    }
    ckpt.tensors.push_back(std::move(ct));
  }
  return ckpt;
}

void restore_parameters(ParameterStore& params, const Checkpoint& ckpt) {
  for (auto& e : params.entries()) {
    auto it = std::find_if(ckpt.tensors.begin(), ckpt.tensors.end(),
                           [&](const CheckpointTensor& t) { return t.name == e.name; });
    if (it == ckpt.tensors.end()) throw ContractError("checkpoint lacks parameter " + e.name);
    if (it->shape != e.tensor.shape()) {
      throw DimensionError("checkpoint parameter " + e.name + " has shape " + ad::shape_str(it->shape) +
                           ", model expects " + ad::shape_str(e.tensor.shape()));
    }
    std::copy(it->values.begin(), it->values.end(), e.tensor.mutable_values().begin());
  }
}

}  // namespace spikeseg
