#include "vertseg/augment.hpp"

#include <cmath>
#include <numbers>

#include "vertseg/error.hpp"

namespace F = torch::nn::functional;

namespace vertseg {

namespace {

constexpr std::array<std::string_view, kAugOpCount> kOpNames{
    "flip_lr", "flip_ud", "central_crop", "random_crop", "contrast", "brightness",
    "transpose", "rotation", "shear", "zoom", "shift"};

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

enum class Resample { Bilinear, Nearest };

torch::Tensor resize(const torch::Tensor& x, int64_t h, int64_t w, Resample mode) {
  return mode == Resample::Bilinear ? resize_image(x, h, w) : resize_mask(x, h, w);
}

torch::Tensor apply_step(const GeometricStep& step, const torch::Tensor& x, Resample mode) {
  using Kind = GeometricStep::Kind;
  switch (step.kind) {
    case Kind::FlipLR: return x.flip({1});
    case Kind::FlipUD: return x.flip({0});
    case Kind::Transpose: return x.t().contiguous();
    case Kind::Crop: {
      auto c = x.slice(0, step.top, step.top + step.height).slice(1, step.left, step.left + step.width).contiguous();
      return resize(c, x.size(0), x.size(1), mode);
    }
    case Kind::Affine: {
      auto theta = torch::tensor(std::vector<double>(step.theta.begin(), step.theta.end()), torch::kFloat32)
                       .view({1, 2, 3});
      auto grid = F::affine_grid(theta, {1, 1, x.size(0), x.size(1)}, /*align_corners=*/false);
      auto opts = F::GridSampleFuncOptions().align_corners(false);
      if (mode == Resample::Bilinear) {
        opts.mode(torch::kBilinear).padding_mode(torch::kBorder);
      } else {
        opts.mode(torch::kNearest).padding_mode(torch::kZeros);
      }
      return F::grid_sample(x.unsqueeze(0).unsqueeze(0), grid, opts).squeeze(0).squeeze(0);
    }
  }
  return x;
}

torch::Tensor replay(const AugmentationRecord& record, const torch::Tensor& x, Resample mode) {
  auto y = x.to(torch::kFloat32);
  for (const auto& step : record.geometric) y = apply_step(step, y, mode);
  return resize(y, x.size(0), x.size(1), mode).contiguous();
}

}  // namespace

std::string_view to_string(AugOp op) { return kOpNames[static_cast<int>(op)]; }

AugOp parse_aug_op(std::string_view name) {
  for (int i = 0; i < kAugOpCount; ++i) {
    if (kOpNames[i] == name) return static_cast<AugOp>(i);
  }
  throw ConfigError("unknown augmentation op '" + std::string(name) + "'");
}

double AugmentationConfig::probability(AugOp op) const {
  const double p = op_probability[static_cast<int>(op)];
  return p < 0.0 ? p_op : p;
}

void AugmentationConfig::validate() const {
  auto unit = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!unit(p_set1)) throw ConfigError("aug.p_set1 must lie in [0, 1]");
  if (!unit(p_op)) throw ConfigError("aug.p_op must lie in [0, 1]");
  for (double p : op_probability) {
    if (p > 1.0) throw ConfigError("augmentation op probabilities must lie in [0, 1]");
  }
  if (!(zoom_lo > 0.0 && zoom_lo <= zoom_hi)) throw ConfigError("aug zoom range must be positive and ordered");
  if (!(contrast_lo <= contrast_hi)) throw ConfigError("aug contrast range must be ordered");
  if (!(crop_min_area > 0.0 && crop_min_area <= 1.0)) throw ConfigError("aug.crop_min_area must lie in (0, 1]");
  if (rotation_deg < 0 || shear_deg < 0 || shift_fraction < 0 || brightness < 0) {
    throw ConfigError("augmentation ranges must be nonnegative");
  }
}

AugmentedSample augment(const SliceSample& sample, const AugmentationConfig& cfg, Rng& rng) {
  if (sample.image.dim() != 2 || sample.image.sizes() != sample.mask.sizes()) {
    throw ShapeError("augment expects matching 2D image and mask");
  }
  AugmentedSample out{sample, {}};
  auto& rec = out.record;
  auto image = sample.image.to(torch::kFloat32);
  const int64_t h = image.size(0), w = image.size(1);
  rec.set1 = bernoulli(rng, cfg.p_set1);

  auto push_geometric = [&](const GeometricStep& step) {
    rec.geometric.push_back(step);
    image = apply_step(step, image, Resample::Bilinear);
  };

  if (rec.set1) {
    for (AugOp op : kSet1Ops) {
      if (!bernoulli(rng, cfg.probability(op))) continue;
      rec.applied.push_back(op);
      const int64_t ch = image.size(0), cw = image.size(1);
      GeometricStep step;
      switch (op) {
        case AugOp::FlipLR: step.kind = GeometricStep::Kind::FlipLR; push_geometric(step); break;
        case AugOp::FlipUD: step.kind = GeometricStep::Kind::FlipUD; push_geometric(step); break;
        case AugOp::Transpose: step.kind = GeometricStep::Kind::Transpose; push_geometric(step); break;
        case AugOp::CentralCrop:
        case AugOp::RandomCrop: {
          const double side = uniform(rng, std::sqrt(cfg.crop_min_area), 1.0);
          step.kind = GeometricStep::Kind::Crop;
          step.height = std::clamp<int64_t>(std::llround(side * static_cast<double>(ch)), 1, ch);
          step.width = std::clamp<int64_t>(std::llround(side * static_cast<double>(cw)), 1, cw);
          if (op == AugOp::CentralCrop) {
            step.top = (ch - step.height) / 2;
            step.left = (cw - step.width) / 2;
          } else {
            step.top = static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(ch - step.height + 1)));
            step.left = static_cast<int64_t>(uniform_index(rng, static_cast<uint64_t>(cw - step.width + 1)));
          }
          push_geometric(step);
          break;
        }
        case AugOp::Contrast: {
          const double c = uniform(rng, cfg.contrast_lo, cfg.contrast_hi);
          auto mean = image.mean();
          image = (image - mean) * c + mean;
          break;
        }
        case AugOp::Brightness:
          image = image + uniform(rng, -cfg.brightness, cfg.brightness);
          break;
        default: break;
      }
    }
  } else {
    double rot = 0.0, shear = 0.0, zoom = 1.0, tx = 0.0, ty = 0.0;
    for (AugOp op : kSet2Ops) {
      if (!bernoulli(rng, cfg.probability(op))) continue;
      rec.applied.push_back(op);
      switch (op) {
        case AugOp::Rotation: rot = deg2rad(uniform(rng, -cfg.rotation_deg, cfg.rotation_deg)); break;
        case AugOp::Shear: shear = deg2rad(uniform(rng, -cfg.shear_deg, cfg.shear_deg)); break;
        case AugOp::Zoom: zoom = uniform(rng, cfg.zoom_lo, cfg.zoom_hi); break;
        case AugOp::Shift:
          tx = 2.0 * uniform(rng, -cfg.shift_fraction, cfg.shift_fraction);
          ty = 2.0 * uniform(rng, -cfg.shift_fraction, cfg.shift_fraction);
          break;
        default: break;
      }
    }
    if (!rec.applied.empty()) {
      // input = R(rot) * Shear(shear) * output / zoom + t
      const double c = std::cos(rot), s = std::sin(rot), k = std::tan(shear);
      GeometricStep step;
      step.kind = GeometricStep::Kind::Affine;
      step.theta = {c / zoom, (c * k - s) / zoom, tx, s / zoom, (s * k + c) / zoom, ty};
      push_geometric(step);
    }
  }

  out.sample.image = resize_image(image, h, w).clamp(-1.0, 1.0).contiguous();
  out.sample.mask = (replay(rec, sample.mask, Resample::Nearest) > 0.5).to(torch::kFloat32);
  return out;
}

torch::Tensor apply_geometric(const AugmentationRecord& record, const torch::Tensor& mask) {
  return (replay(record, mask, Resample::Nearest) > 0.5).to(torch::kFloat32);
}

torch::Tensor apply_geometric_image(const AugmentationRecord& record, const torch::Tensor& image) {
  return replay(record, image, Resample::Bilinear).clamp(-1.0, 1.0);
}

}  // namespace vertseg
