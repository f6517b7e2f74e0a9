#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vertseg/network.hpp"

namespace vertseg {

inline constexpr int kArchiveSchemaVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

// Single-file container: an 8-byte magic, a length-prefixed JSON manifest
// (pretty-printed, human-readable) and the raw little-endian tensor payload.
// The manifest lists every tensor's name, dtype, shape and byte offset, and
// carries a payload checksum.
struct TensorArchive {
  nlohmann::json manifest;
  NamedTensors tensors;

  const torch::Tensor& at(const std::string& name) const;
};

void write_tensor_archive(const std::filesystem::path& path, nlohmann::json manifest,
                          const NamedTensors& tensors);
TensorArchive read_tensor_archive(const std::filesystem::path& path);
// Reads only the manifest.
nlohmann::json read_archive_manifest(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Human-readable list of differing fields, "" when the configs match.
std::string diff_configs(const nlohmann::json& expected, const nlohmann::json& actual);

// Every parameter and buffer of the module, in registration order.
NamedTensors model_state(const torch::nn::Module& module);
// Deep copy of model_state.
NamedTensors snapshot_state(const torch::nn::Module& module);
void restore_state(torch::nn::Module& module, const NamedTensors& state);

void save_weights(const DoubleUNet& model, const std::filesystem::path& path);
void save_weights(const ModelConfig& cfg, const NamedTensors& state, const std::filesystem::path& path);

// Loads into an existing model. The archive's architecture tag and config must
// match the model's; mismatches throw ConfigError listing the offending fields.
void load_weights(DoubleUNet& model, const std::filesystem::path& path);

// Builds a model from the archive's embedded config and loads its weights.
DoubleUNet load_model(const std::filesystem::path& path);

}  // namespace vertseg
