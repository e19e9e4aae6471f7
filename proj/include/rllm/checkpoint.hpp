#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "rllm/common.hpp"
#include "rllm/layers.hpp"
#include "rllm/models.hpp"

namespace rllm::nn {

// Checkpoint = directory with manifest.json plus one little-endian f64 blob.
// Everything a stage needs to resume lives here: parameters, batch-norm
// running stats, optimizer moments, feature normalization statistics.

struct TensorBlob {
  std::vector<std::int64_t> shape;
  std::vector<double> data;
};

class CheckpointWriter {
 public:
  CheckpointWriter(std::string kind, nlohmann::json model_cfg, std::uint64_t config_hash)
      : kind_(std::move(kind)), model_cfg_(std::move(model_cfg)), config_hash_(config_hash) {}

  void add(const std::string& name, std::vector<std::int64_t> shape, std::vector<double> data,
           bool trainable = false) {
    if (tensors_.count(name)) throw ValidationError("checkpoint: duplicate tensor " + name);
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    if (n != static_cast<std::int64_t>(data.size()))
      throw ValidationError("checkpoint: shape/data mismatch for " + name);
    tensors_[name] = {std::move(shape), std::move(data)};
    trainable_[name] = trainable;
  }

  template <class T>
  void add_store(const ParamStore<T>& store) {
    std::size_t i = 0;
    for (const auto& p : store.all()) {
      add(p->name, p->value.shape,
          std::vector<double>(p->value.data.begin(), p->value.data.end()), store.is_trainable(i));
      ++i;
    }
  }

  void set_extra(const std::string& key, nlohmann::json v) { extra_[key] = std::move(v); }

  // Returns the blob hash (the checkpoint id).
  std::uint64_t write(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream blob(fs::path(dir) / "tensors.bin", std::ios::binary);
    if (!blob) throw ValidationError("checkpoint: cannot write blob in " + dir);
    nlohmann::json manifest;
    manifest["format"] = 1;
    manifest["kind"] = kind_;
    manifest["config_hash"] = hash_hex(config_hash_);
    manifest["model"] = model_cfg_;
    manifest["extra"] = extra_;
    nlohmann::json tj;
    std::uint64_t offset = 0;
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : tensors_) {  // std::map: stable order
      tj[name] = {{"shape", t.shape},
                  {"dtype", "f64"},
                  {"offset", offset},
                  {"trainable", trainable_.at(name)}};
      blob.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
      h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
      offset += t.data.size() * sizeof(double);
    }
    if (!blob) throw ValidationError("checkpoint: blob write failed in " + dir);
    manifest["tensors"] = tj;
    manifest["blob_hash"] = hash_hex(h);
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
    if (!mf) throw ValidationError("checkpoint: manifest write failed in " + dir);
    return h;
  }

 private:
  std::string kind_;
  nlohmann::json model_cfg_;
  std::uint64_t config_hash_;
  std::map<std::string, TensorBlob> tensors_;
  std::map<std::string, bool> trainable_;
  nlohmann::json extra_;
};

struct Checkpoint {
  nlohmann::json manifest;
  std::map<std::string, TensorBlob> tensors;
  std::uint64_t blob_hash = 0;

  const TensorBlob& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ArtifactMismatch("checkpoint: missing tensor " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  std::string kind() const { return manifest.value("kind", ""); }
  std::string config_hash_hex() const { return manifest.value("config_hash", ""); }
};

inline Checkpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw ArtifactMismatch("checkpoint: missing manifest in " + dir);
  Checkpoint out;
  try {
    mf >> out.manifest;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(FormatError::Reason::malformed, "checkpoint manifest: " + std::string(e.what()));
  }
  if (out.manifest.value("format", 0) != 1)
    throw FormatError(FormatError::Reason::bad_version, "checkpoint: unsupported manifest format");
  std::ifstream blob(fs::path(dir) / "tensors.bin", std::ios::binary);
  if (!blob) throw ArtifactMismatch("checkpoint: missing blob in " + dir);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto& [name, meta] : out.manifest.at("tensors").items()) {
    TensorBlob t;
    t.shape = meta.at("shape").get<std::vector<std::int64_t>>();
    std::int64_t n = 1;
    for (auto d : t.shape) n *= d;
    t.data.resize(static_cast<std::size_t>(n));
    blob.seekg(static_cast<std::streamoff>(meta.at("offset").get<std::uint64_t>()));
    blob.read(reinterpret_cast<char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!blob) throw FormatError(FormatError::Reason::truncated, "checkpoint: blob truncated in " + dir);
    out.tensors[name] = std::move(t);
  }
  for (const auto& [name, t] : out.tensors)
    h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
  out.blob_hash = h;
  const std::string recorded = out.manifest.value("blob_hash", "");
  if (!recorded.empty() && recorded != hash_hex(h))
    throw ArtifactMismatch("checkpoint: blob hash mismatch in " + dir);
  return out;
}

// Restore parameters by name into an existing model store.
template <class T>
void restore_params(ParamStore<T>& store, const Checkpoint& ckpt) {
  for (const auto& p : store.all()) {
    const auto& t = ckpt.tensor(p->name);
    if (t.shape != p->value.shape)
      throw ArtifactMismatch("checkpoint: shape mismatch for " + p->name + ": have " +
                             shape_str(p->value.shape) + ", file has " + shape_str(t.shape));
    for (std::size_t i = 0; i < t.data.size(); ++i)
      p->value.data[i] = static_cast<T>(t.data[i]);
  }
}

// ---- model-config (de)serialization ----

inline nlohmann::json to_json(const RefModelConfig& c) {
  return {{"k", c.k},       {"l", c.l},       {"dim", c.dim},
          {"heads", c.heads}, {"blocks", c.blocks}, {"ffn_hidden", c.ffn_hidden},
          {"head_hidden", c.head_hidden}, {"seed", c.seed}};
}

inline RefModelConfig ref_config_from_json(const nlohmann::json& j) {
  RefModelConfig c;
  c.k = j.at("k");
  c.l = j.at("l");
  c.dim = j.at("dim");
  c.heads = j.at("heads");
  c.blocks = j.at("blocks");
  c.ffn_hidden = j.at("ffn_hidden");
  c.head_hidden = j.at("head_hidden");
  c.seed = j.at("seed");
  return c;
}

inline nlohmann::json to_json(const BackboneConfig& c) {
  return {{"k", c.k},           {"l", c.l},           {"dim", c.dim},
          {"heads", c.heads},   {"layers", c.layers}, {"ffn_hidden", c.ffn_hidden},
          {"lora_rank", c.lora_rank}, {"lora_scale", c.lora_scale},
          {"head_hidden", c.head_hidden}, {"causal", c.causal},
          {"trainable_pos", c.trainable_pos}, {"seed", c.seed}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.k = j.at("k");
  c.l = j.at("l");
  c.dim = j.at("dim");
  c.heads = j.at("heads");
  c.layers = j.at("layers");
  c.ffn_hidden = j.at("ffn_hidden");
  c.lora_rank = j.at("lora_rank");
  c.lora_scale = j.at("lora_scale");
  c.head_hidden = j.at("head_hidden");
  c.causal = j.value("causal", false);
  c.trainable_pos = j.value("trainable_pos", false);
  c.seed = j.at("seed");
  return c;
}

inline nlohmann::json to_json(const AeConfig& c) {
  return {{"k", c.k},       {"dim", c.dim},     {"ladder", c.ladder},
          {"fc_hidden", c.fc_hidden}, {"latent", c.latent}, {"seed", c.seed}};
}

inline AeConfig ae_config_from_json(const nlohmann::json& j) {
  AeConfig c;
  c.k = j.at("k");
  c.dim = j.at("dim");
  c.ladder = j.at("ladder").get<std::vector<std::int64_t>>();
  c.fc_hidden = j.at("fc_hidden");
  c.latent = j.at("latent");
  c.seed = j.at("seed");
  return c;
}

}  // namespace rllm::nn
