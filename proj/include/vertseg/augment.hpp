#pragma once

#include <torch/torch.h>

#include <array>
#include <string_view>
#include <vector>

#include "vertseg/rng.hpp"
#include "vertseg/slices.hpp"

namespace vertseg {

enum class AugOp {
  FlipLR,
  FlipUD,
  CentralCrop,
  RandomCrop,
  Contrast,
  Brightness,
  Transpose,
  Rotation,
  Shear,
  Zoom,
  Shift,
};
inline constexpr int kAugOpCount = 11;
inline constexpr std::array<AugOp, 7> kSet1Ops{AugOp::FlipLR,   AugOp::FlipUD,     AugOp::CentralCrop,
                                               AugOp::RandomCrop, AugOp::Contrast, AugOp::Brightness,
                                               AugOp::Transpose};
inline constexpr std::array<AugOp, 4> kSet2Ops{AugOp::Rotation, AugOp::Shear, AugOp::Zoom, AugOp::Shift};

std::string_view to_string(AugOp op);
AugOp parse_aug_op(std::string_view name);

struct AugmentationConfig {
  double p_set1 = 0.6;
  double p_op = 0.5;
  // Per-op overrides of p_op; negative means "use p_op".
  std::array<double, kAugOpCount> op_probability = filled(-1.0);

  double rotation_deg = 15.0;
  double shear_deg = 10.0;
  double zoom_lo = 0.85, zoom_hi = 1.15;
  double shift_fraction = 0.10;
  double contrast_lo = 0.8, contrast_hi = 1.2;
  double brightness = 0.1;
  double crop_min_area = 0.8;

  uint64_t seed = 0;

  double probability(AugOp op) const;
  void set_probability(AugOp op, double p) { op_probability[static_cast<int>(op)] = p; }
  void validate() const;

 private:
  static constexpr std::array<double, kAugOpCount> filled(double v) {
    std::array<double, kAugOpCount> a{};
    for (auto& x : a) x = v;
    return a;
  }
};

/// One geometric step, replayable on any H×W tensor.
struct GeometricStep {
  enum class Kind { FlipLR, FlipUD, Transpose, Crop, Affine };
  Kind kind = Kind::FlipLR;
  // Crop box in pixels of the tensor the step is applied to.
  int64_t top = 0, left = 0, height = 0, width = 0;
  // Output-to-input map in normalized coordinates ([-1, 1]), row-major 2×3.
  std::array<double, 6> theta{1, 0, 0, 0, 1, 0};
};

struct AugmentationRecord {
  bool set1 = true;
  std::vector<AugOp> applied;
  std::vector<GeometricStep> geometric;
};

struct AugmentedSample {
  SliceSample sample;
  AugmentationRecord record;
};

/// Chooses set 1 with probability p_set1 (else set 2) and applies each op of
/// the chosen set independently. Geometric ops move image and mask together;
/// contrast and brightness touch the image only. The image is re-clipped to
/// [-1, 1] and the output has the input's size.
AugmentedSample augment(const SliceSample& sample, const AugmentationConfig& cfg, Rng& rng);

/// Replays the geometric steps of a record on a mask (nearest, re-binarized).
torch::Tensor apply_geometric(const AugmentationRecord& record, const torch::Tensor& mask);

// Image variant (bilinear, border padding, clipped to [-1, 1]).
torch::Tensor apply_geometric_image(const AugmentationRecord& record, const torch::Tensor& image);

}  // namespace vertseg
