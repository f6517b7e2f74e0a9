#include "vertseg/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>

#include "vertseg/error.hpp"

namespace fs = std::filesystem;

namespace vertseg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) bad_value(key, v, "a number");
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, v, "a number");
  }
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const long long d = std::stoll(v, &used);
    if (used != v.size()) bad_value(key, v, "an integer");
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, v, "an integer");
  }
}

uint64_t to_uint(const std::string& key, const std::string& v) {
  const int64_t d = to_int(key, v);
  if (d < 0) bad_value(key, v, "a nonnegative integer");
  return static_cast<uint64_t>(d);
}

bool to_bool(const std::string& key, const std::string& v) {
  std::string l = v;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "true" || l == "1" || l == "on" || l == "yes") return true;
  if (l == "false" || l == "0" || l == "off" || l == "no") return false;
  bad_value(key, v, "a boolean");
}

template <typename F>
auto rethrow_as_config(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

using Setter = std::function<void(RunSettings&, const std::string& key, const std::string& value)>;

struct KeySpec {
  std::string key;
  std::string description;
  Setter set;
};

#define VS_DOUBLE(field) [](RunSettings& s, const std::string& k, const std::string& v) { s.field = to_double(k, v); }
#define VS_INT(field) [](RunSettings& s, const std::string& k, const std::string& v) { s.field = to_int(k, v); }
#define VS_BOOL(field) [](RunSettings& s, const std::string& k, const std::string& v) { s.field = to_bool(k, v); }
#define VS_MODEL [](RunSettings& s, const std::string& k, const std::string& v) { s.model_overrides[k] = v; }

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = {
      {"scale", "desk or full; selects size defaults (set first)", [](RunSettings&, const std::string&, const std::string&) {}},
      {"seed", "master seed for splits, initialisation and data streams",
       [](RunSettings& s, const std::string& k, const std::string& v) { s.seed = to_uint(k, v); }},
      {"plane", "sagittal, coronal, axial or all",
       [](RunSettings& s, const std::string& k, const std::string& v) {
         if (v == "all") {
           s.planes.assign(kAllPlanes.begin(), kAllPlanes.end());
         } else {
           s.planes = {rethrow_as_config(k, [&] { return parse_plane(v); })};
         }
       }},
      {"model.architecture", "plusplus or baseline",
       [](RunSettings& s, const std::string& k, const std::string& v) {
         s.architecture = rethrow_as_config(k, [&] { return parse_architecture(v); });
       }},
      {"model.input_size", "network input edge length (multiple of 16)", VS_MODEL},
      {"model.rf_dim", "random-feature dimension D", VS_MODEL},
      {"model.rf_sigma", "random-feature kernel bandwidth", VS_MODEL},
      {"model.rf_resample", "redraw random features on every training forward", VS_MODEL},
      {"model.rf_placement", "all or last: decoder stages using random-feature squeeze blocks", VS_MODEL},
      {"model.se_reduction", "squeeze-excite reduction ratio", VS_MODEL},
      {"model.psa_groups", "pyramid squeeze attention groups", VS_MODEL},
      {"train.epochs", "number of epochs", VS_INT(train.epochs)},
      {"train.batch_size", "batch size", VS_INT(train.batch_size)},
      {"train.lr_start", "learning rate at epoch 0", VS_DOUBLE(train.lr_start)},
      {"train.lr_peak", "learning rate at the end of warmup", VS_DOUBLE(train.lr_peak)},
      {"train.lr_final", "learning rate at the last epoch", VS_DOUBLE(train.lr_final)},
      {"train.warmup_fraction", "fraction of epochs spent warming up", VS_DOUBLE(train.warmup_fraction)},
      {"train.beta1", "Adam beta1", VS_DOUBLE(train.beta1)},
      {"train.beta2", "Adam beta2", VS_DOUBLE(train.beta2)},
      {"train.adam_eps", "Adam epsilon", VS_DOUBLE(train.adam_eps)},
      {"train.w_bce", "weight of the cross-entropy term", VS_DOUBLE(train.w_bce)},
      {"train.w_dice", "weight of the Dice term", VS_DOUBLE(train.w_dice)},
      {"train.supervise_mask1", "also supervise the first network's mask", VS_BOOL(train.supervise_mask1)},
      {"train.augment", "apply the augmentation engine to training samples", VS_BOOL(train.augment)},
      {"train.deterministic", "single-threaded deterministic kernels", VS_BOOL(train.deterministic)},
      {"aug.p_set1", "probability of drawing from augmentation set 1", VS_DOUBLE(train.aug.p_set1)},
      {"aug.p_op", "per-op probability inside the chosen set", VS_DOUBLE(train.aug.p_op)},
      {"aug.p.<op>", "override p_op for one op (flip_lr, flip_ud, central_crop, random_crop, contrast, "
                     "brightness, transpose, rotation, shear, zoom, shift)",
       nullptr},
      {"aug.rotation_deg", "rotation range, +/- degrees", VS_DOUBLE(train.aug.rotation_deg)},
      {"aug.shear_deg", "shear range, +/- degrees", VS_DOUBLE(train.aug.shear_deg)},
      {"aug.zoom_lo", "lower zoom factor", VS_DOUBLE(train.aug.zoom_lo)},
      {"aug.zoom_hi", "upper zoom factor", VS_DOUBLE(train.aug.zoom_hi)},
      {"aug.shift_fraction", "shift range as a fraction of the extent", VS_DOUBLE(train.aug.shift_fraction)},
      {"aug.contrast_lo", "lower contrast factor", VS_DOUBLE(train.aug.contrast_lo)},
      {"aug.contrast_hi", "upper contrast factor", VS_DOUBLE(train.aug.contrast_hi)},
      {"aug.brightness", "brightness delta range, +/-", VS_DOUBLE(train.aug.brightness)},
      {"aug.crop_min_area", "smallest kept area fraction for crops", VS_DOUBLE(train.aug.crop_min_area)},
      {"normalize.divisor", "intensity divisor", VS_DOUBLE(train.normalize.divisor)},
      {"normalize.max_shift", "training shift range, +/-", VS_DOUBLE(train.normalize.max_shift)},
      {"normalize.scale_lo", "lower training scale", VS_DOUBLE(train.normalize.scale_lo)},
      {"normalize.scale_hi", "upper training scale", VS_DOUBLE(train.normalize.scale_hi)},
      {"normalize.literal_scale_range", "draw the scale from (-scale_hi, scale_hi)",
       VS_BOOL(train.normalize.literal_scale_range)},
      {"eval.threshold", "binarisation threshold (ties are foreground)",
       [](RunSettings& s, const std::string& k, const std::string& v) {
         s.eval.threshold = to_double(k, v);
         s.train.threshold = s.eval.threshold;
       }},
      {"eval.average", "micro or macro",
       [](RunSettings& s, const std::string& k, const std::string& v) {
         s.eval.averaging = rethrow_as_config(k, [&] { return parse_averaging(v); });
       }},
      {"eval.batch_size", "inference batch size", VS_INT(eval.batch_size)},
      {"slices.size", "slice edge length written by preprocess (0 keeps native size)", VS_INT(slices.size)},
      {"slices.keep_empty", "keep slices without foreground", VS_BOOL(slices.keep_empty)},
      {"slices.stride", "keep every n-th slice along each plane", VS_INT(slice_stride)},
      {"split.train", "train fraction", VS_DOUBLE(split.fractions[0])},
      {"split.valid", "valid fraction", VS_DOUBLE(split.fractions[1])},
      {"split.test", "test fraction", VS_DOUBLE(split.fractions[2])},
      {"ablation.seeds", "comma-separated seeds",
       [](RunSettings& s, const std::string&, const std::string& v) { s.ablation_seeds = parse_seed_list(v); }},
      {"synth.volumes", "phantoms generated by synth", VS_INT(synth_volumes)},
  };
  return table;
}

#undef VS_DOUBLE
#undef VS_INT
#undef VS_BOOL
#undef VS_MODEL

void apply_scale_defaults(RunSettings& s) {
  if (s.scale == Scale::Desk) {
    s.slices.size = ModelConfig::desk(Architecture::PlusPlus).input_height;
    s.train.epochs = 12;
    s.train.batch_size = 4;
  } else {
    s.slices.size = ModelConfig::full(Architecture::PlusPlus).input_height;
  }
}

}  // namespace

FlatConfig FlatConfig::parse(const std::string& text, const std::string& source) {
  FlatConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    cfg.values_[key] = trim(line.substr(eq + 1));
  }
  return cfg;
}

FlatConfig FlatConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing config file: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.string());
}

void FlatConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty()) {
    throw ConfigError("expected key=value, got '" + assignment + "'");
  }
  values_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

std::optional<std::string> FlatConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    seeds.push_back(to_uint("ablation.seeds", item));
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  return seeds;
}

RunSettings settings_from_config(const FlatConfig& cfg) {
  RunSettings s;
  if (auto scale = cfg.get("scale")) s.scale = rethrow_as_config("scale", [&] { return parse_scale(*scale); });
  apply_scale_defaults(s);
  const auto& table = key_table();
  for (const auto& [key, value] : cfg.values()) {
    if (key.rfind("aug.p.", 0) == 0) {
      const auto op = rethrow_as_config(key, [&] { return parse_aug_op(key.substr(6)); });
      s.train.aug.set_probability(op, to_double(key, value));
      continue;
    }
    auto it = std::find_if(table.begin(), table.end(), [&](const KeySpec& k) { return k.key == key && k.set; });
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->set(s, key, value);
  }
  s.train.seed = s.seed;
  if (s.slice_stride < 1) throw ConfigError("slices.stride must be >= 1");
  if (s.slices.size < 0) throw ConfigError("slices.size must be >= 0");
  return s;
}

ModelConfig RunSettings::model_config(Architecture arch) const {
  auto mc = scale == Scale::Desk ? ModelConfig::desk(arch) : ModelConfig::full(arch);
  mc.init_seed = seed;
  mc.rf_seed = seed;
  for (const auto& [key, value] : model_overrides) {
    if (key == "model.input_size") {
      mc.input_height = mc.input_width = to_int(key, value);
    } else if (key == "model.rf_dim") {
      mc.block.rf_dim = to_int(key, value);
    } else if (key == "model.rf_sigma") {
      mc.block.rf_sigma = to_double(key, value);
    } else if (key == "model.rf_resample") {
      mc.block.rf_resample_per_forward = to_bool(key, value);
    } else if (key == "model.rf_placement") {
      mc.rf_placement = rethrow_as_config(key, [&] { return parse_rf_placement(value); });
    } else if (key == "model.se_reduction") {
      mc.block.se_reduction = to_int(key, value);
    } else if (key == "model.psa_groups") {
      mc.block.psa_groups = to_int(key, value);
    }
  }
  mc.validate();
  return mc;
}

std::vector<std::pair<std::string, std::string>> config_schema() {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : key_table()) out.emplace_back(k.key, k.description);
  return out;
}

}  // namespace vertseg
