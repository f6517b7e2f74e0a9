#include "vertseg/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "vertseg/error.hpp"

namespace vertseg {

static_assert(std::endian::native == std::endian::little, "archive payloads are little-endian");

namespace {

constexpr char kMagic[8] = {'V', 'S', 'E', 'G', 'A', 'R', 'C', '1'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kInt32: return "int32";
    case torch::kUInt8: return "uint8";
    default: throw FormatError(std::string("archive: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from_name(const std::string& name) {
  if (name == "float32") return torch::kFloat32;
  if (name == "float64") return torch::kFloat64;
  if (name == "int64") return torch::kInt64;
  if (name == "int32") return torch::kInt32;
  if (name == "uint8") return torch::kUInt8;
  throw FormatError("archive: unknown dtype '" + name + "'");
}

uint64_t fnv1a(const char* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

struct RawArchive {
  nlohmann::json manifest;
  std::string payload;
};

RawArchive read_raw(const std::filesystem::path& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open archive " + path.string());
  char magic[8];
  uint64_t manifest_len = 0;
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw FormatError("corrupt archive " + path.string() + ": bad magic");
  }
  if (!in.read(reinterpret_cast<char*>(&manifest_len), sizeof manifest_len) || manifest_len > (1ULL << 32)) {
    throw FormatError("corrupt archive " + path.string() + ": bad manifest length");
  }
  std::string text(manifest_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(manifest_len))) {
    throw FormatError("corrupt archive " + path.string() + ": truncated manifest");
  }
  RawArchive raw;
  try {
    raw.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt archive " + path.string() + ": " + e.what());
  }
  if (!raw.manifest.contains("schema_version") || raw.manifest["schema_version"] != kArchiveSchemaVersion) {
    throw FormatError("archive " + path.string() + ": unsupported schema version");
  }
  if (with_payload) {
    raw.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return raw;
}

void flatten_diff(const nlohmann::json& a, const nlohmann::json& b, std::ostringstream& os) {
  auto fa = a.flatten();
  auto fb = b.flatten();
  std::map<std::string, std::pair<std::string, std::string>> diffs;
  for (auto it = fa.begin(); it != fa.end(); ++it) {
    auto other = fb.find(it.key());
    if (other == fb.end()) {
      diffs[it.key()] = {it.value().dump(), "<missing>"};
    } else if (*other != it.value()) {
      diffs[it.key()] = {it.value().dump(), other->dump()};
    }
  }
  for (auto it = fb.begin(); it != fb.end(); ++it) {
    if (!fa.contains(it.key())) diffs[it.key()] = {"<missing>", it.value().dump()};
  }
  for (const auto& [key, values] : diffs) {
    os << "  " << key << ": archive=" << values.first << " model=" << values.second << "\n";
  }
}

}  // namespace

const torch::Tensor& TensorArchive::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("archive has no tensor named '" + name + "'");
}

void write_tensor_archive(const std::filesystem::path& path, nlohmann::json manifest,
                          const NamedTensors& tensors) {
  std::string payload;
  auto index = nlohmann::json::array();
  for (const auto& [name, tensor] : tensors) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const size_t nbytes = t.numel() * t.element_size();
    index.push_back({{"name", name},
                     {"dtype", dtype_name(t.scalar_type())},
                     {"shape", t.sizes().vec()},
                     {"offset", payload.size()},
                     {"nbytes", nbytes}});
    payload.append(static_cast<const char*>(t.data_ptr()), nbytes);
  }
  manifest["schema_version"] = kArchiveSchemaVersion;
  manifest["tensors"] = index;
  manifest["payload_bytes"] = payload.size();
  manifest["payload_fnv1a"] = hex(fnv1a(payload.data(), payload.size()));

  const std::string text = manifest.dump(2);
  const uint64_t len = text.size();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write archive " + path.string());
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("failed writing archive " + path.string());
}

nlohmann::json read_archive_manifest(const std::filesystem::path& path) {
  return read_raw(path, false).manifest;
}

TensorArchive read_tensor_archive(const std::filesystem::path& path) {
  auto raw = read_raw(path, true);
  const auto& m = raw.manifest;
  if (m.value("payload_bytes", uint64_t{0}) != raw.payload.size() ||
      m.value("payload_fnv1a", std::string{}) != hex(fnv1a(raw.payload.data(), raw.payload.size()))) {
    throw FormatError("corrupt archive " + path.string() + ": payload checksum mismatch");
  }
  TensorArchive archive;
  archive.manifest = m;
  for (const auto& entry : m.at("tensors")) {
    const auto offset = entry.at("offset").get<uint64_t>();
    const auto nbytes = entry.at("nbytes").get<uint64_t>();
    if (offset + nbytes > raw.payload.size()) {
      throw FormatError("corrupt archive " + path.string() + ": tensor extends past payload");
    }
    auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from_name(entry.at("dtype"))));
    if (static_cast<uint64_t>(t.numel() * t.element_size()) != nbytes) {
      throw FormatError("corrupt archive " + path.string() + ": size mismatch for " +
                        entry.at("name").get<std::string>());
    }
    std::memcpy(t.data_ptr(), raw.payload.data() + offset, nbytes);
    archive.tensors.emplace_back(entry.at("name").get<std::string>(), t);
  }
  return archive;
}

nlohmann::json to_json(const ModelConfig& cfg) {
  const auto& b = cfg.block;
  return {
      {"architecture", to_string(cfg.architecture)},
      {"scale", to_string(cfg.scale)},
      {"input_height", cfg.input_height},
      {"input_width", cfg.input_width},
      {"in_channels", cfg.in_channels},
      {"dense",
       {{"init_features", cfg.dense.init_features},
        {"growth_rate", cfg.dense.growth_rate},
        {"bn_size", cfg.dense.bn_size},
        {"block_depths", cfg.dense.block_depths},
        {"compression", cfg.dense.compression}}},
      {"vgg", {{"widths", cfg.vgg.widths}, {"depths", cfg.vgg.depths}}},
      {"encoder2_channels", cfg.encoder2_channels},
      {"decoder_channels", cfg.decoder_channels},
      {"block",
       {{"out_channels", b.out_channels},
        {"aspp_rates", b.aspp_rates},
        {"psa_groups", b.psa_groups},
        {"psa_kernel_sizes", b.psa_kernel_sizes},
        {"se_reduction", b.se_reduction},
        {"rf_dim", b.rf_dim},
        {"rf_sigma", b.rf_sigma},
        {"rf_resample_per_forward", b.rf_resample_per_forward},
        {"spatial_kernel", b.spatial_kernel}}},
      {"rf_placement", to_string(cfg.rf_placement)},
      {"rf_seed", cfg.rf_seed},
      {"init_seed", cfg.init_seed},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    cfg.architecture = parse_architecture(j.at("architecture").get<std::string>());
    cfg.scale = parse_scale(j.at("scale").get<std::string>());
    j.at("input_height").get_to(cfg.input_height);
    j.at("input_width").get_to(cfg.input_width);
    j.at("in_channels").get_to(cfg.in_channels);
    const auto& d = j.at("dense");
    d.at("init_features").get_to(cfg.dense.init_features);
    d.at("growth_rate").get_to(cfg.dense.growth_rate);
    d.at("bn_size").get_to(cfg.dense.bn_size);
    d.at("block_depths").get_to(cfg.dense.block_depths);
    d.at("compression").get_to(cfg.dense.compression);
    j.at("vgg").at("widths").get_to(cfg.vgg.widths);
    j.at("vgg").at("depths").get_to(cfg.vgg.depths);
    j.at("encoder2_channels").get_to(cfg.encoder2_channels);
    j.at("decoder_channels").get_to(cfg.decoder_channels);
    const auto& b = j.at("block");
    b.at("out_channels").get_to(cfg.block.out_channels);
    b.at("aspp_rates").get_to(cfg.block.aspp_rates);
    b.at("psa_groups").get_to(cfg.block.psa_groups);
    b.at("psa_kernel_sizes").get_to(cfg.block.psa_kernel_sizes);
    b.at("se_reduction").get_to(cfg.block.se_reduction);
    b.at("rf_dim").get_to(cfg.block.rf_dim);
    b.at("rf_sigma").get_to(cfg.block.rf_sigma);
    b.at("rf_resample_per_forward").get_to(cfg.block.rf_resample_per_forward);
    b.at("spatial_kernel").get_to(cfg.block.spatial_kernel);
    cfg.rf_placement = parse_rf_placement(j.at("rf_placement").get<std::string>());
    j.at("rf_seed").get_to(cfg.rf_seed);
    j.at("init_seed").get_to(cfg.init_seed);
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model config: ") + e.what());
  }
}

std::string diff_configs(const nlohmann::json& expected, const nlohmann::json& actual) {
  std::ostringstream os;
  flatten_diff(expected, actual, os);
  return os.str();
}

NamedTensors model_state(const torch::nn::Module& module) {
  NamedTensors state;
  for (const auto& item : module.named_parameters(true)) state.emplace_back(item.key(), item.value());
  for (const auto& item : module.named_buffers(true)) state.emplace_back(item.key(), item.value());
  return state;
}

NamedTensors snapshot_state(const torch::nn::Module& module) {
  NamedTensors state = model_state(module);
  for (auto& [name, t] : state) t = t.detach().clone();
  return state;
}

void restore_state(torch::nn::Module& module, const NamedTensors& state) {
  std::map<std::string, torch::Tensor> incoming(state.begin(), state.end());
  auto target = model_state(module);
  if (incoming.size() != target.size()) {
    throw FormatError("state has " + std::to_string(incoming.size()) + " tensors, model expects " +
                      std::to_string(target.size()));
  }
  torch::NoGradGuard no_grad;
  for (auto& [name, t] : target) {
    auto it = incoming.find(name);
    if (it == incoming.end()) throw FormatError("state is missing tensor '" + name + "'");
    if (it->second.sizes() != t.sizes()) {
      std::ostringstream os;
      os << "tensor '" << name << "' has shape " << it->second.sizes() << ", model expects " << t.sizes();
      throw FormatError(os.str());
    }
    t.copy_(it->second);
  }
}

void save_weights(const ModelConfig& cfg, const NamedTensors& state, const std::filesystem::path& path) {
  nlohmann::json manifest{{"kind", "doubleunet-weights"},
                          {"architecture", to_string(cfg.architecture)},
                          {"config", to_json(cfg)}};
  write_tensor_archive(path, std::move(manifest), state);
}

void save_weights(const DoubleUNet& model, const std::filesystem::path& path) {
  save_weights(model->config(), model_state(*model), path);
}

void load_weights(DoubleUNet& model, const std::filesystem::path& path) {
  auto archive = read_tensor_archive(path);
  const auto& m = archive.manifest;
  const auto tag = m.value("architecture", std::string{});
  if (tag != to_string(model->architecture())) {
    throw ConfigError("architecture tag mismatch: archive " + path.string() + " holds '" + tag +
                      "', model is '" + std::string(to_string(model->architecture())) + "'");
  }
  const auto diff = diff_configs(m.at("config"), to_json(model->config()));
  if (!diff.empty()) {
    throw ConfigError("config mismatch between archive " + path.string() + " and model:\n" + diff);
  }
  restore_state(*model, archive.tensors);
}

DoubleUNet load_model(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing model archive: " + path.string());
  auto archive = read_tensor_archive(path);
  auto cfg = model_config_from_json(archive.manifest.at("config"));
  auto model = build_model(cfg);
  restore_state(*model, archive.tensors);
  return model;
}

}  // namespace vertseg
