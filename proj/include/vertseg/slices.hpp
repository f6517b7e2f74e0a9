#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vertseg/rng.hpp"
#include "vertseg/volume.hpp"

namespace vertseg {

enum class Phase { Train, Valid, Test };
inline constexpr std::array<Phase, 3> kAllPhases{Phase::Train, Phase::Valid, Phase::Test};
std::string_view to_string(Phase phase);
Phase parse_phase(std::string_view name);

/// One 2D training/evaluation sample. `image` is float32 H×W, `mask` is
/// float32 H×W with entries in {0, 1}.
struct SliceSample {
  torch::Tensor image;
  torch::Tensor mask;
  Plane plane = Plane::Sagittal;
  std::string volume_id;
  int64_t slice_index = 0;
  Phase phase = Phase::Train;
};

struct SliceOptions {
  int64_t size = 256;  // 0 keeps the native slice extent
  bool keep_empty = false;
};

/// Cuts one slice per index along the plane's normal axis. The two in-plane
/// array axes keep their relative order (rows = lower axis index). Images are
/// resized bilinearly, masks by nearest neighbour and binarized (nonzero -> 1).
std::vector<SliceSample> extract_slices(const Volume& image, const Volume& mask, Plane plane,
                                        const SliceOptions& options = {}, const std::string& volume_id = "",
                                        Phase phase = Phase::Train);

// Bilinear resize of an H×W image / nearest resize of an H×W mask.
torch::Tensor resize_image(const torch::Tensor& image, int64_t height, int64_t width);
torch::Tensor resize_mask(const torch::Tensor& mask, int64_t height, int64_t width);

enum class NormalizeMode { Train, Eval };

struct NormalizeOptions {
  double divisor = 2048.0;
  double max_shift = 0.25;
  double scale_lo = 0.75;
  double scale_hi = 1.25;
  // Draw the scale from (-scale_hi, scale_hi) instead of (scale_lo, scale_hi).
  bool literal_scale_range = false;
};

/// x / divisor; in train mode then + u and * s with one (u, s) draw per image;
/// finally clipped to [-1, 1].
torch::Tensor normalize_intensity(const torch::Tensor& image, NormalizeMode mode, Rng& rng,
                                  const NormalizeOptions& options = {});

/// Slice cache on disk: one raw float32 image file and one uint8 mask file per
/// slice plus `index.json`. Writing merges with an existing index, replacing
/// entries of the planes being written.
void write_slice_cache(const std::filesystem::path& dir, const std::vector<SliceSample>& samples);
std::vector<SliceSample> read_slice_cache(const std::filesystem::path& dir,
                                          std::optional<Plane> plane = std::nullopt,
                                          std::optional<Phase> phase = std::nullopt);

struct DatasetSplit {
  std::vector<std::string> train, valid, test;
  const std::vector<std::string>& of(Phase phase) const;
};

/// Volume-level split. Sizes follow the largest-remainder rule on
/// n * fractions; membership is a seeded shuffle.
DatasetSplit split_dataset(const std::vector<std::string>& volume_ids, const std::array<double, 3>& fractions,
                           uint64_t seed);

}  // namespace vertseg
