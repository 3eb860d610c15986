#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdfd/errors.hpp"
#include "pdfd/models.hpp"
#include "pdfd/tensor.hpp"

namespace pdfd {

// Checkpoint layout: one line of JSON followed by '\n', then the concatenated
// little-endian float64 payloads. The header lists each tensor's name, shape
// and byte offset into the payload, plus a free-form "meta" object.
inline void save_checkpoint(const std::string& path, const ParamRefs& tensors,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json header;
  header["format"] = "pdfd-checkpoint";
  header["version"] = 1;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = tensor->shape();
    entry["offset"] = offset;
    header["tensors"].push_back(entry);
    offset += tensor->numel() * sizeof(double);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  const std::string head = header.dump();
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.put('\n');
  for (const auto& [name, tensor] : tensors) {
    out.write(reinterpret_cast<const char*>(tensor->data().data()),
              static_cast<std::streamsize>(tensor->numel() * sizeof(double)));
  }
  if (!out) throw DataError("write failed for " + path);
}

// Loads into the given tensor set; every listed tensor must be present in the
// file with a matching shape. Returns the meta object.
inline nlohmann::json load_checkpoint(const std::string& path, const ParamRefs& tensors) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::string head;
  if (!std::getline(in, head)) throw FormatError(path + ": missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": header is not valid JSON: " + e.what());
  }
  if (header.value("format", "") != "pdfd-checkpoint") {
    throw FormatError(path + ": not a checkpoint file");
  }
  if (header.value("version", 0) != 1) {
    throw FormatError(path + ": unsupported checkpoint version");
  }
  const std::size_t payload_start = head.size() + 1;

  struct Entry {
    Shape shape;
    std::size_t offset;
  };
  std::unordered_map<std::string, Entry> index;
  for (const auto& entry : header.at("tensors")) {
    Entry e;
    e.shape = entry.at("shape").get<Shape>();
    e.offset = entry.at("offset").get<std::size_t>();
    index.emplace(entry.at("name").get<std::string>(), std::move(e));
  }

  for (const auto& [name, tensor] : tensors) {
    const auto it = index.find(name);
    if (it == index.end()) {
      throw FormatError(path + ": checkpoint is missing tensor '" + name + "'");
    }
    if (it->second.shape != tensor->shape()) {
      throw FormatError(path + ": tensor '" + name + "' has shape " +
                        shape_str(it->second.shape) + ", expected " +
                        shape_str(tensor->shape()));
    }
    in.clear();
    in.seekg(static_cast<std::streamoff>(payload_start + it->second.offset));
    in.read(reinterpret_cast<char*>(tensor->data().data()),
            static_cast<std::streamsize>(tensor->numel() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != tensor->numel() * sizeof(double)) {
      throw FormatError(path + ": truncated payload for tensor '" + name +
                        "' at byte offset " +
                        std::to_string(payload_start + it->second.offset));
    }
    tensor->check_finite("checkpoint tensor " + name);
  }
  return header.value("meta", nlohmann::json::object());
}

}  // namespace pdfd
