#pragma once

// Checkpoint layout (little-endian):
//   magic "MDCKPT01" | u32 header length | JSON header | float32 arrays in header order
// The JSON header carries the schema id, a free-form metadata object and the
// shape table [{name, shape}]. Loading requires the shape table to match the
// receiving parameter list exactly.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metadiff/nn/tensor.hpp"

namespace metadiff::nn {

inline constexpr char kCheckpointMagic[8] = {'M', 'D', 'C', 'K', 'P', 'T', '0', '1'};

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

template <typename T>
std::vector<NamedArray> snapshot(const ParameterList<T>& params, const std::string& prefix = "") {
  std::vector<NamedArray> out;
  for (const auto* p : params) {
    NamedArray a{prefix + p->name, p->value.shape(), {}};
    a.values.reserve(p->value.numel());
    for (auto v : p->value.values()) a.values.push_back(static_cast<float>(v));
    out.push_back(std::move(a));
  }
  return out;
}

template <typename T>
std::vector<NamedArray> snapshot(std::vector<Tensor<T>>& tensors, const ParameterList<T>& params,
                                 const std::string& prefix) {
  std::vector<NamedArray> out;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    NamedArray a{prefix + params[k]->name, tensors[k].shape(), {}};
    for (auto v : tensors[k].values()) a.values.push_back(static_cast<float>(v));
    out.push_back(std::move(a));
  }
  return out;
}

inline void write_checkpoint(const std::filesystem::path& path, const std::string& schema,
                             const nlohmann::json& metadata, const std::vector<NamedArray>& arrays) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& a : arrays) table.push_back({{"name", a.name}, {"shape", a.shape}});
  const std::string header = nlohmann::json{{"schema", schema}, {"metadata", metadata}, {"arrays", table}}.dump();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const auto len = static_cast<std::uint32_t>(header.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& a : arrays)
      out.write(reinterpret_cast<const char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * sizeof(float)));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointFile {
  std::string schema;
  nlohmann::json metadata;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }
};

inline CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error(path.string() + " is not a checkpoint (bad magic)");
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header(len, '\0');
  in.read(header.data(), len);
  if (!in) throw std::runtime_error(path.string() + ": truncated header");
  const auto j = nlohmann::json::parse(header);
  CheckpointFile ck;
  ck.schema = j.at("schema").get<std::string>();
  ck.metadata = j.value("metadata", nlohmann::json::object());
  for (const auto& e : j.at("arrays")) {
    NamedArray a{e.at("name").get<std::string>(), e.at("shape").get<std::vector<int>>(), {}};
    a.values.resize(Tensor<float>::count(a.shape));
    in.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * sizeof(float)));
    if (!in) throw std::runtime_error(path.string() + ": truncated data for " + a.name);
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

/// Copies arrays named prefix + param name into params; every parameter must be present with its exact shape.
template <typename T>
void restore(const CheckpointFile& ck, const ParameterList<T>& params, const std::string& prefix = "") {
  for (auto* p : params) {
    const NamedArray* a = ck.find(prefix + p->name);
    if (!a) throw std::runtime_error("checkpoint is missing array '" + prefix + p->name + "'");
    if (a->shape != p->value.shape())
      throw std::runtime_error("checkpoint shape mismatch for '" + prefix + p->name + "': file " +
                               Tensor<float>(a->shape).shape_string() + " vs model " + p->value.shape_string());
    for (std::size_t i = 0; i < a->values.size(); ++i) p->value[i] = static_cast<T>(a->values[i]);
  }
}

/// Checks that the file's parameter table (arrays named prefix*) equals the model's exactly.
template <typename T>
void require_exact_table(const CheckpointFile& ck, const ParameterList<T>& params, const std::string& prefix = "") {
  std::size_t in_file = 0;
  for (const auto& a : ck.arrays)
    if (a.name.rfind(prefix, 0) == 0) ++in_file;
  if (in_file != params.size())
    throw std::runtime_error("checkpoint has " + std::to_string(in_file) + " arrays under '" + prefix + "' but model has " +
                             std::to_string(params.size()));
}

}  // namespace metadiff::nn
