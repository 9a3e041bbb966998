#pragma once

#include "ctxseg/model.hpp"
#include "ctxseg/registry.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <memory>

namespace ctxseg {

inline constexpr char kCheckpointMagic[8] = {'C', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

// Versioned archive: 8-byte magic, u64 JSON header length, JSON header
// (model config, registry snapshot, epoch, rng state, tensor table), then
// contiguous row-major tensor payloads.
template <typename T>
void save_checkpoint(const std::string& path, const SegModel<T>& model,
                     const CollectiveRegistry& registry, const std::string& config_hash,
                     int epoch, const std::string& rng_state) {
  nlohmann::json header;
  header["version"] = 1;
  header["scalar"] = sizeof(T) == 4 ? "f32" : "f64";
  header["epoch"] = epoch;
  header["config_hash"] = config_hash;
  header["rng_state"] = rng_state;
  header["model"] = model.config().to_json();
  header["n_tasks"] = model.task_count();
  header["n_modalities"] = model.modality_count();
  header["registry"] = registry.to_json();

  std::uint64_t offset = 0;
  header["tensors"] = nlohmann::json::array();
  for (const auto& p : model.params()) {
    header["tensors"].push_back({{"name", p.name},
                                 {"rows", p.w.rows()},
                                 {"cols", p.w.cols()},
                                 {"offset", offset}});
    offset += static_cast<std::uint64_t>(p.w.size()) * sizeof(T);
  }

  std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "io", "cannot write checkpoint " + path);
  out.write(kCheckpointMagic, 8);
  std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& p : model.params())
    out.write(reinterpret_cast<const char*>(p.w.data()),
              static_cast<std::streamsize>(p.w.size() * sizeof(T)));
  require(out.good(), "io", "short write to checkpoint " + path);
}

template <typename T>
struct LoadedCheckpoint {
  std::unique_ptr<SegModel<T>> model;
  CollectiveRegistry registry;
  int epoch = 0;
  std::string config_hash;
  std::string rng_state;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "io", "cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  require(in.gcount() == 8 && std::memcmp(magic, kCheckpointMagic, 8) == 0, "checkpoint",
          "bad checkpoint magic in " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  require(in.good(), "checkpoint", "truncated checkpoint header in " + path);
  nlohmann::json header = nlohmann::json::parse(hs);
  require(header.value("version", 0) == 1, "checkpoint", "unsupported checkpoint version");

  LoadedCheckpoint<T> loaded;
  loaded.registry = CollectiveRegistry::from_json(header.at("registry"));
  loaded.epoch = header.value("epoch", 0);
  loaded.config_hash = header.value("config_hash", "");
  loaded.rng_state = header.value("rng_state", "");

  ModelConfig cfg = ModelConfig::from_json(header.at("model"));
  const int n_tasks = header.at("n_tasks").get<int>();
  const int n_modalities = header.at("n_modalities").get<int>();
  require(n_tasks == loaded.registry.task_count(), "checkpoint",
          "checkpoint task pool does not match its registry snapshot");
  loaded.model = std::make_unique<SegModel<T>>(cfg, n_tasks, n_modalities, 0);

  const std::string scalar = header.value("scalar", "f32");
  const size_t elem = scalar == "f64" ? 8 : 4;
  const std::streampos payload = in.tellg();
  for (const auto& tj : header.at("tensors")) {
    const std::string name = tj.at("name").get<std::string>();
    const Index rows = tj.at("rows").get<Index>();
    const Index cols = tj.at("cols").get<Index>();
    Param<T>* p = loaded.model->params().find(name);
    require(p != nullptr, "checkpoint", "checkpoint tensor not in model: " + name);
    require(p->w.rows() == rows && p->w.cols() == cols, "checkpoint",
            "tensor shape mismatch for " + name);
    in.seekg(payload + static_cast<std::streamoff>(tj.at("offset").get<std::uint64_t>()));
    const size_t count = static_cast<size_t>(rows * cols);
    if (scalar == (sizeof(T) == 4 ? "f32" : "f64")) {
      in.read(reinterpret_cast<char*>(p->w.data()),
              static_cast<std::streamsize>(count * sizeof(T)));
    } else if (scalar == "f32") {
      std::vector<float> buf(count);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * 4));
      for (size_t i = 0; i < count; ++i) p->w.data()[i] = static_cast<T>(buf[i]);
    } else {
      std::vector<double> buf(count);
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * 8));
      for (size_t i = 0; i < count; ++i) p->w.data()[i] = static_cast<T>(buf[i]);
    }
    require(in.good(), "checkpoint", "truncated tensor payload for " + name);
    (void)elem;
  }
  return loaded;
}

}  // namespace ctxseg
