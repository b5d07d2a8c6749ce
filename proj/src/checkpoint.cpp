#include "mlkd/checkpoint.hpp"

#include <fstream>

namespace mlkd {

void save_tensor_container(const std::string& bin_path, const std::string& index_path,
                           const std::vector<TensorEntry>& entries,
                           const nlohmann::ordered_json& header) {
  nlohmann::ordered_json index;
  index["format_version"] = 1;
  index["header"] = header;
  auto params = nlohmann::ordered_json::array();

  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw FormatError("cannot open for writing: " + bin_path);
  uint64_t offset = 0;
  for (const auto& e : entries) {
    if (product(e.shape) != static_cast<int64_t>(e.data.size()))
      throw ShapeError("checkpoint: entry " + e.name + " data does not match shape");
    nlohmann::ordered_json p;
    p["name"] = e.name;
    p["shape"] = e.shape;
    p["offset"] = offset;
    p["count"] = e.data.size();
    params.push_back(std::move(p));
    bin.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(float)));
    offset += e.data.size() * sizeof(float);
  }
  index["params"] = std::move(params);
  if (!bin) throw FormatError("short write: " + bin_path);
  bin.close();

  std::ofstream idx(index_path, std::ios::trunc);
  if (!idx) throw FormatError("cannot open for writing: " + index_path);
  idx << index.dump(2) << "\n";
}

TensorContainer load_tensor_container(const std::string& bin_path,
                                      const std::string& index_path) {
  std::ifstream idx(index_path);
  if (!idx) throw FormatError("cannot open checkpoint index: " + index_path);
  nlohmann::json index;
  try {
    idx >> index;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(index_path + ": index parse failure: " + e.what());
  }

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw FormatError("cannot open checkpoint data: " + bin_path);
  std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  TensorContainer out;
  out.header = index.value("header", nlohmann::json::object());
  try {
    for (const auto& p : index.at("params")) {
      TensorEntry e;
      e.name = p.at("name").get<std::string>();
      e.shape = p.at("shape").get<Shape>();
      uint64_t offset = p.at("offset").get<uint64_t>();
      uint64_t count = p.at("count").get<uint64_t>();
      if (offset + count * sizeof(float) > blob.size())
        throw FormatError(bin_path + ": parameter " + e.name + " extends past end of file (byte " +
                          std::to_string(offset) + ")");
      e.data.resize(count);
      std::memcpy(e.data.data(), blob.data() + offset, count * sizeof(float));
      out.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(index_path + ": index field failure: " + e.what());
  }
  return out;
}

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["height"] = cfg.height;
  j["width"] = cfg.width;
  j["channels"] = cfg.channels;
  j["widths"] = cfg.widths;
  j["embed_dim"] = cfg.embed_dim;
  j["heads"] = cfg.heads;
  j["classes"] = cfg.classes;
  j["capacity"] = cfg.capacity;
  j["positional_encoding"] = cfg.positional_encoding;
  j["seed"] = cfg.seed;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.height = j.at("height").get<int64_t>();
  cfg.width = j.at("width").get<int64_t>();
  cfg.channels = j.at("channels").get<int64_t>();
  cfg.widths = j.at("widths").get<std::vector<int64_t>>();
  cfg.embed_dim = j.at("embed_dim").get<int64_t>();
  cfg.heads = j.at("heads").get<int64_t>();
  cfg.classes = j.at("classes").get<int64_t>();
  cfg.capacity = j.value("capacity", std::string("teacher"));
  cfg.positional_encoding = j.value("positional_encoding", false);
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.validate();
  return cfg;
}

uint64_t file_checksum(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for checksum: " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return fnv1a64(blob);
}

}  // namespace mlkd
