#include "vertseg/slices.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "vertseg/error.hpp"

namespace F = torch::nn::functional;
namespace fs = std::filesystem;
using nlohmann::json;

namespace vertseg {

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::Train: return "train";
    case Phase::Valid: return "valid";
    case Phase::Test: return "test";
  }
  return "?";
}

Phase parse_phase(std::string_view name) {
  if (name == "train") return Phase::Train;
  if (name == "valid") return Phase::Valid;
  if (name == "test") return Phase::Test;
  throw ConfigError("unknown phase '" + std::string(name) + "' (expected train, valid or test)");
}

torch::Tensor resize_image(const torch::Tensor& image, int64_t height, int64_t width) {
  if (image.size(0) == height && image.size(1) == width) return image;
  auto opts = F::InterpolateFuncOptions()
                  .size(std::vector<int64_t>{height, width})
                  .mode(torch::kBilinear)
                  .align_corners(false);
  return F::interpolate(image.unsqueeze(0).unsqueeze(0), opts).squeeze(0).squeeze(0).contiguous();
}

torch::Tensor resize_mask(const torch::Tensor& mask, int64_t height, int64_t width) {
  if (mask.size(0) == height && mask.size(1) == width) return mask;
  auto opts = F::InterpolateFuncOptions()
                  .size(std::vector<int64_t>{height, width})
                  .mode(torch::kNearestExact)
                  .align_corners(false);
  return F::interpolate(mask.unsqueeze(0).unsqueeze(0), opts).squeeze(0).squeeze(0).contiguous();
}

std::vector<SliceSample> extract_slices(const Volume& image, const Volume& mask, Plane plane,
                                        const SliceOptions& options, const std::string& volume_id, Phase phase) {
  image.validate();
  mask.validate();
  if (image.data.sizes() != mask.data.sizes()) {
    std::ostringstream os;
    os << "image and mask volumes differ in shape (" << image.data.sizes() << " vs " << mask.data.sizes() << ")";
    throw ShapeError(os.str());
  }
  for (int a = 0; a < 3; ++a) {
    if (std::abs(image.spacing[a] - mask.spacing[a]) > 1e-6) {
      throw ShapeError("image and mask volumes differ in spacing along axis " + std::to_string(a));
    }
  }
  const int axis = image.normal_axis(plane);
  auto img = image.data.to(torch::kFloat32);
  auto msk = (mask.data != 0).to(torch::kFloat32);
  std::vector<SliceSample> out;
  const int64_t n = image.extent(axis);
  for (int64_t i = 0; i < n; ++i) {
    auto m = msk.select(axis, i);
    if (!options.keep_empty && !m.any().item<bool>()) continue;
    SliceSample s;
    s.image = img.select(axis, i).contiguous();
    s.mask = m.contiguous();
    if (options.size > 0) {
      s.image = resize_image(s.image, options.size, options.size);
      s.mask = (resize_mask(s.mask, options.size, options.size) > 0.5).to(torch::kFloat32);
    }
    s.plane = plane;
    s.volume_id = volume_id;
    s.slice_index = i;
    s.phase = phase;
    out.push_back(std::move(s));
  }
  return out;
}

torch::Tensor normalize_intensity(const torch::Tensor& image, NormalizeMode mode, Rng& rng,
                                  const NormalizeOptions& options) {
  auto x = image.to(torch::kFloat32) / options.divisor;
  if (mode == NormalizeMode::Train) {
    const double u = uniform(rng, -options.max_shift, options.max_shift);
    const double s = options.literal_scale_range ? uniform(rng, -options.scale_hi, options.scale_hi)
                                                 : uniform(rng, options.scale_lo, options.scale_hi);
    x = (x + u) * s;
  }
  return x.clamp(-1.0, 1.0);
}

namespace {

std::string slice_stem(const SliceSample& s) {
  return std::string(to_string(s.plane)) + "/" + s.volume_id + "_" + std::to_string(s.slice_index);
}

void write_bytes(const fs::path& path, const void* data, size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("failed writing " + path.string());
}

void read_bytes(const fs::path& path, void* data, size_t n) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing slice file: " + path.string());
  if (!in.read(static_cast<char*>(data), static_cast<std::streamsize>(n)) || in.peek() != EOF) {
    throw FormatError("slice file has unexpected size: " + path.string());
  }
}

json read_index(const fs::path& dir) {
  const auto path = dir / "index.json";
  if (!fs::exists(path)) return json{{"slices", json::array()}};
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("corrupt slice index " + path.string() + ": " + e.what());
  }
}

}  // namespace

void write_slice_cache(const fs::path& dir, const std::vector<SliceSample>& samples) {
  fs::create_directories(dir);
  json index = read_index(dir);
  std::vector<std::string> planes;
  for (const auto& s : samples) planes.emplace_back(to_string(s.plane));
  json kept = json::array();
  for (const auto& e : index.at("slices")) {
    if (std::find(planes.begin(), planes.end(), e.at("plane").get<std::string>()) == planes.end()) kept.push_back(e);
  }
  for (const auto& s : samples) {
    const auto stem = slice_stem(s);
    fs::create_directories(dir / to_string(s.plane));
    auto img = s.image.to(torch::kFloat32).contiguous();
    auto msk = s.mask.to(torch::kUInt8).contiguous();
    write_bytes(dir / (stem + ".f32"), img.data_ptr(), img.numel() * sizeof(float));
    write_bytes(dir / (stem + ".u8"), msk.data_ptr(), msk.numel());
    kept.push_back({{"volume_id", s.volume_id},
                    {"plane", to_string(s.plane)},
                    {"slice_index", s.slice_index},
                    {"phase", to_string(s.phase)},
                    {"height", s.image.size(0)},
                    {"width", s.image.size(1)},
                    {"stem", stem}});
  }
  index["slices"] = kept;
  std::ofstream out(dir / "index.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "index.json").string());
  out << index.dump(1) << "\n";
}

std::vector<SliceSample> read_slice_cache(const fs::path& dir, std::optional<Plane> plane,
                                          std::optional<Phase> phase) {
  if (!fs::exists(dir / "index.json")) throw IoError("missing slice cache index: " + (dir / "index.json").string());
  const json index = read_index(dir);
  std::vector<SliceSample> out;
  try {
    for (const auto& e : index.at("slices")) {
      SliceSample s;
      s.plane = parse_plane(e.at("plane").get<std::string>());
      s.phase = parse_phase(e.at("phase").get<std::string>());
      if ((plane && s.plane != *plane) || (phase && s.phase != *phase)) continue;
      s.volume_id = e.at("volume_id").get<std::string>();
      s.slice_index = e.at("slice_index").get<int64_t>();
      const int64_t h = e.at("height").get<int64_t>(), w = e.at("width").get<int64_t>();
      const auto stem = e.at("stem").get<std::string>();
      s.image = torch::empty({h, w}, torch::kFloat32);
      read_bytes(dir / (stem + ".f32"), s.image.data_ptr(), h * w * sizeof(float));
      auto m = torch::empty({h, w}, torch::kUInt8);
      read_bytes(dir / (stem + ".u8"), m.data_ptr(), h * w);
      s.mask = m.to(torch::kFloat32);
      out.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed slice index in " + dir.string() + ": " + e.what());
  }
  return out;
}

const std::vector<std::string>& DatasetSplit::of(Phase phase) const {
  switch (phase) {
    case Phase::Train: return train;
    case Phase::Valid: return valid;
    case Phase::Test: return test;
  }
  return train;
}

DatasetSplit split_dataset(const std::vector<std::string>& volume_ids, const std::array<double, 3>& fractions,
                           uint64_t seed) {
  const size_t n = volume_ids.size();
  if (n < 3) throw ConfigError("need at least 3 volumes to split into train/valid/test (got " + std::to_string(n) + ")");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ConfigError("split fractions must sum to 1");

  std::array<size_t, 3> sizes{};
  std::array<double, 3> remainder{};
  size_t assigned = 0;
  for (int p = 0; p < 3; ++p) {
    const double quota = static_cast<double>(n) * fractions[p];
    sizes[p] = static_cast<size_t>(std::floor(quota + 1e-9));
    remainder[p] = quota - static_cast<double>(sizes[p]);
    assigned += sizes[p];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
  // Every phase with a nonzero share gets at least one volume.
  for (int p = 0; p < 3; ++p) {
    if (sizes[p] == 0 && fractions[p] > 0.0) {
      auto donor = std::max_element(sizes.begin(), sizes.end());
      --*donor;
      ++sizes[p];
    }
  }

  std::vector<std::string> ids = volume_ids;
  std::sort(ids.begin(), ids.end());
  Rng rng(mix64(seed ^ 0x5b117));
  for (size_t i = n - 1; i > 0; --i) std::swap(ids[i], ids[uniform_index(rng, i + 1)]);
  DatasetSplit split;
  auto it = ids.begin();
  for (int p = 0; p < 3; ++p) {
    auto& dst = p == 0 ? split.train : p == 1 ? split.valid : split.test;
    dst.assign(it, it + static_cast<std::ptrdiff_t>(sizes[p]));
    std::sort(dst.begin(), dst.end());
    it += static_cast<std::ptrdiff_t>(sizes[p]);
  }
  return split;
}

}  // namespace vertseg
