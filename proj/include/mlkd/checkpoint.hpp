#pragma once

// Checkpoint container: a flat binary file of little-endian float32 values
// per parameter plus a JSON index mapping parameter name -> shape and byte
// offset. Model checkpoints add the full ModelConfig to the header.

#include <string>
#include <vector>

#include <json.hpp>

#include "mlkd/common.hpp"
#include "mlkd/model.hpp"

namespace mlkd {

struct TensorEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void save_tensor_container(const std::string& bin_path, const std::string& index_path,
                           const std::vector<TensorEntry>& entries,
                           const nlohmann::ordered_json& header);

struct TensorContainer {
  std::vector<TensorEntry> entries;
  nlohmann::json header;
};

TensorContainer load_tensor_container(const std::string& bin_path,
                                      const std::string& index_path);

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

uint64_t file_checksum(const std::string& path);

template <typename T>
void save_model(const Model<T>& model, const std::string& bin_path,
                const std::string& index_path) {
  std::vector<TensorEntry> entries;
  entries.reserve(model.params().size());
  for (const auto& [name, t] : model.params()) {
    TensorEntry e;
    e.name = name;
    e.shape = t.shape();
    e.data.assign(t.value().begin(), t.value().end());
    entries.push_back(std::move(e));
  }
  nlohmann::ordered_json header;
  header["model_config"] = model_config_to_json(model.config());
  save_tensor_container(bin_path, index_path, entries, header);
}

template <typename T>
Model<T> load_model(const std::string& bin_path, const std::string& index_path) {
  TensorContainer c = load_tensor_container(bin_path, index_path);
  if (!c.header.contains("model_config"))
    throw FormatError(index_path + ": missing model_config header");
  Model<T> model(model_config_from_json(c.header.at("model_config")));
  for (auto& [name, p] : model.params()) {
    bool found = false;
    for (const auto& e : c.entries) {
      if (e.name != name) continue;
      if (e.shape != p.shape())
        throw FormatError(index_path + ": parameter " + name + " has shape " +
                          shape_str(e.shape) + ", model expects " + shape_str(p.shape()));
      p.value().assign(e.data.begin(), e.data.end());
      found = true;
      break;
    }
    if (!found) throw FormatError(index_path + ": parameter " + name + " missing");
  }
  return model;
}

}  // namespace mlkd
