#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vertseg/ablation.hpp"
#include "vertseg/evaluation.hpp"
#include "vertseg/network.hpp"
#include "vertseg/slices.hpp"
#include "vertseg/training.hpp"

namespace vertseg {

/// Flat `key = value` settings. `#` starts a comment; blank lines are
/// ignored; keys are dotted lower-case names.
class FlatConfig {
 public:
  static FlatConfig parse(const std::string& text, const std::string& source = "<string>");
  static FlatConfig load(const std::filesystem::path& path);

  // Parses "key=value".
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool contains(const std::string& key) const { return values_.count(key) > 0; }
  std::optional<std::string> get(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct SplitFractions {
  std::array<double, 3> fractions{113.0 / 319.0, 103.0 / 319.0, 103.0 / 319.0};
};

/// Everything a CLI run can be configured with.
struct RunSettings {
  Scale scale = Scale::Desk;
  uint64_t seed = 0;
  std::vector<Plane> planes{kAllPlanes.begin(), kAllPlanes.end()};
  Architecture architecture = Architecture::PlusPlus;
  std::map<std::string, std::string> model_overrides;  // model.* keys
  TrainConfig train;
  EvaluateOptions eval;
  SliceOptions slices;
  int64_t slice_stride = 1;
  SplitFractions split;
  std::vector<uint64_t> ablation_seeds{0, 1, 2};
  int synth_volumes = 4;

  // Model config for an architecture at the current scale, with the model.*
  // overrides applied.
  ModelConfig model_config(Architecture arch) const;
};

/// Applies settings on top of the defaults for `scale`. Unknown keys throw
/// ConfigError naming the key.
RunSettings settings_from_config(const FlatConfig& cfg);

/// Documented keys with one-line descriptions, for `--help-config`.
std::vector<std::pair<std::string, std::string>> config_schema();

std::vector<uint64_t> parse_seed_list(const std::string& text);

}  // namespace vertseg
