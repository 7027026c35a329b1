// spikeseg/checkpoint.hpp
//
// Named parameter registry and its on-disk form. A checkpoint file is
//
//   uint64 (little endian)   length H of the JSON header in bytes
//   H bytes                  JSON: {"format", "version", "meta",
//                                   "tensors": [{"name", "shape", "offset", "count"}]}
//   payload                  float64 little endian, tensor after tensor;
//                            "offset" is the byte offset inside the payload
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikeseg/tensor.hpp"

namespace spikeseg {

class ParameterStore {
 public:
  struct Entry {
    std::string name;
    ad::Tensor tensor;
  };

  // Registers a trainable leaf; names must be unique.
  ad::Tensor add(const std::string& name, ad::Shape shape, std::vector<double> values);
  const ad::Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

struct CheckpointTensor {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<CheckpointTensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Copies values by name; every parameter must be present with the same shape.
void restore_parameters(ParameterStore& params, const Checkpoint& ckpt);

}  // namespace spikeseg
