#include "vertseg/blocks.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "vertseg/error.hpp"
#include "vertseg/log.hpp"
#include "vertseg/rng.hpp"

namespace F = torch::nn::functional;

namespace vertseg {

torch::Tensor bounded_sigmoid(const torch::Tensor& x) {
  return torch::sigmoid(x).clamp(kProbabilityFloor, 1.0 - kProbabilityFloor);
}

void BlockConfig::validate() const {
  if (out_channels < 1) throw ConfigError("block out_channels must be positive");
  for (auto r : aspp_rates) {
    if (r < 1) throw ConfigError("ASPP dilation rates must be positive");
  }
  if (psa_groups < 1) throw ConfigError("psa_groups must be positive");
  if (static_cast<int64_t>(psa_kernel_sizes.size()) != psa_groups) {
    throw ConfigError("psa_kernel_sizes must have psa_groups entries");
  }
  for (auto k : psa_kernel_sizes) {
    if (k < 1 || k % 2 == 0) throw ConfigError("PSA kernel sizes must be odd and positive");
  }
  if (out_channels % psa_groups != 0) {
    throw ConfigError("psa_groups must divide the bottleneck channel count");
  }
  if (se_reduction < 1) throw ConfigError("se_reduction must be positive");
  if (rf_dim < 1) throw ConfigError("rf_dim must be positive");
  if (!(rf_sigma > 0.0)) throw ConfigError("rf_sigma must be positive");
  if (spatial_kernel < 1 || spatial_kernel % 2 == 0) {
    throw ConfigError("spatial attention kernel must be odd and positive");
  }
}

namespace {

torch::nn::Conv2dOptions conv_options(int64_t in, int64_t out, int64_t kernel, bool bias) {
  return torch::nn::Conv2dOptions(in, out, kernel).padding(kernel / 2).bias(bias);
}

void require_rank4(const torch::Tensor& x, const char* who) {
  if (x.dim() != 4 || x.size(1) < 1 || x.size(2) < 1 || x.size(3) < 1) {
    std::ostringstream os;
    os << who << ": expected a non-empty N x C x H x W tensor, got " << x.sizes();
    throw ShapeError(os.str());
  }
}

}  // namespace

ConvBlockImpl::ConvBlockImpl(int64_t in_channels, int64_t out_channels) {
  if (in_channels < 1) throw ConfigError("conv_block: in_channels must be positive");
  if (out_channels < 1) throw ConfigError("conv_block: out_channels must be positive");
  conv1_ = register_module("conv1", torch::nn::Conv2d(conv_options(in_channels, out_channels, 3, false)));
  bn1_ = register_module("bn1", torch::nn::BatchNorm2d(out_channels));
  conv2_ = register_module("conv2", torch::nn::Conv2d(conv_options(out_channels, out_channels, 3, false)));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out_channels));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
  require_rank4(x, "conv_block");
  auto y = torch::relu(bn1_(conv1_(x)));
  return torch::relu(bn2_(conv2_(y)));
}

AsppImpl::AsppImpl(int64_t in_channels, const BlockConfig& cfg) : rates_(cfg.aspp_rates) {
  cfg.validate();
  const int64_t out = cfg.out_channels;
  conv1x1_ = register_module("conv1x1", torch::nn::Conv2d(conv_options(in_channels, out, 1, false)));
  bn1x1_ = register_module("bn1x1", torch::nn::BatchNorm2d(out));
  for (int i = 0; i < 3; ++i) {
    auto name = "dilated" + std::to_string(i);
    dilated_.push_back(register_module(name, torch::nn::Conv2d(conv_options(in_channels, out, 3, false))));
    dilated_bn_.push_back(register_module(name + "_bn", torch::nn::BatchNorm2d(out)));
  }
  // No batch norm on the pooled branch: its spatial extent is 1x1 and a single
  // sample would make batch statistics degenerate.
  pool_conv_ = register_module("pool_conv", torch::nn::Conv2d(conv_options(in_channels, out, 1, true)));
  project_ = register_module("project", torch::nn::Conv2d(conv_options(5 * out, out, 1, false)));
  project_bn_ = register_module("project_bn", torch::nn::BatchNorm2d(out));
}

std::array<int64_t, 4> AsppImpl::effective_rates(int64_t height, int64_t width) const {
  const int64_t limit = std::max<int64_t>(1, std::min(height, width) - 1);
  std::array<int64_t, 4> rates = rates_;
  for (auto& r : rates) {
    if (r >= std::min(height, width)) r = limit;
  }
  return rates;
}

torch::Tensor AsppImpl::pooled_branch(const torch::Tensor& x) {
  require_rank4(x, "aspp");
  auto pooled = torch::relu(pool_conv_(F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1))));
  return pooled.expand({x.size(0), pooled.size(1), x.size(2), x.size(3)});
}

torch::Tensor AsppImpl::forward(const torch::Tensor& x) {
  require_rank4(x, "aspp");
  const int64_t h = x.size(2);
  const int64_t w = x.size(3);
  const auto rates = effective_rates(h, w);
  if (rates != rates_) {
    std::lock_guard lock(warned_mutex_);
    if (warned_sizes_.emplace(h, w).second) {
      std::ostringstream os;
      os << "aspp: dilation rates clamped to [" << rates[1] << ", " << rates[2] << ", " << rates[3]
         << "] for a " << h << "x" << w << " feature map";
      log::warn(os.str());
    }
  }

  std::vector<torch::Tensor> branches;
  branches.reserve(5);
  branches.push_back(torch::relu(bn1x1_(conv1x1_(x))));
  for (size_t i = 0; i < dilated_.size(); ++i) {
    const int64_t r = rates[i + 1];
    auto y = F::conv2d(x, dilated_[i]->weight, F::Conv2dFuncOptions().padding(r).dilation(r));
    branches.push_back(torch::relu(dilated_bn_[i](y)));
  }
  branches.push_back(pooled_branch(x));
  return torch::relu(project_bn_(project_(torch::cat(branches, 1))));
}

SpatialAttentionImpl::SpatialAttentionImpl(int64_t kernel_size) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ConfigError("spatial attention kernel must be odd and positive");
  }
  conv_ = register_module("conv", torch::nn::Conv2d(conv_options(2, 1, kernel_size, true)));
}

SpatialAttentionImpl::Output SpatialAttentionImpl::forward_with_map(const torch::Tensor& x) {
  require_rank4(x, "spatial_attention");
  auto avg = x.mean(1, /*keepdim=*/true);
  auto max = std::get<0>(x.max(1, /*keepdim=*/true));
  auto attention = bounded_sigmoid(conv_(torch::cat({avg, max}, 1)));
  return {attention * x, attention};
}

RandomFeatureParams RandomFeatureParams::sample(int64_t output_dim, int64_t input_dim, double sigma,
                                                uint64_t seed) {
  if (output_dim < 1 || input_dim < 1) throw ConfigError("random features need D >= 1 and d >= 1");
  if (!(sigma > 0.0)) throw ConfigError("random feature bandwidth must be positive");
  Rng gen(seed);

  auto projection = torch::empty({output_dim, input_dim}, torch::kFloat64);
  auto phase = torch::empty({output_dim}, torch::kFloat64);
  auto* w = projection.data_ptr<double>();
  for (int64_t i = 0; i < output_dim * input_dim; ++i) w[i] = normal(gen) / sigma;
  auto* b = phase.data_ptr<double>();
  for (int64_t i = 0; i < output_dim; ++i) b[i] = uniform(gen, 0.0, 2.0 * std::numbers::pi);
  return {projection, phase, seed, sigma};
}

torch::Tensor random_feature_map(const torch::Tensor& v, const torch::Tensor& projection,
                                 const torch::Tensor& phase) {
  if (v.dim() < 1 || v.size(-1) != projection.size(1)) {
    std::ostringstream os;
    os << "random_feature_map: input dimension " << (v.dim() < 1 ? 0 : v.size(-1))
       << " does not match projection columns " << projection.size(1);
    throw ShapeError(os.str());
  }
  const auto d = static_cast<double>(projection.size(0));
  auto w = projection.to(v.scalar_type());
  auto b = phase.to(v.scalar_type());
  return std::sqrt(2.0 / d) * torch::cos(torch::matmul(v, w.t()) + b);
}

torch::Tensor random_feature_map(const torch::Tensor& v, const RandomFeatureParams& params) {
  return random_feature_map(v, params.projection, params.phase);
}

SqueezeExciteImpl::SqueezeExciteImpl(int64_t channels, int64_t reduction,
                                     std::optional<RandomFeatureOptions> random_features)
    : channels_(channels), rf_(random_features) {
  if (channels < 1) throw ConfigError("squeeze_excite: channels must be positive");
  if (reduction < 1) throw ConfigError("squeeze_excite: reduction must be positive");
  const int64_t hidden = channels / reduction;
  if (hidden < 1) {
    throw ConfigError("squeeze_excite: channels / reduction must be at least 1 (channels=" +
                      std::to_string(channels) + ", reduction=" + std::to_string(reduction) + ")");
  }
  int64_t in_features = channels;
  if (rf_) {
    auto params = RandomFeatureParams::sample(rf_->dim, channels, rf_->sigma, rf_->seed);
    rf_projection_ = register_buffer("rf_projection", params.projection.to(torch::kFloat32));
    rf_phase_ = register_buffer("rf_phase", params.phase.to(torch::kFloat32));
    in_features = rf_->dim;
  }
  fc1_ = register_module("fc1", torch::nn::Linear(in_features, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, channels));
}

RandomFeatureParams SqueezeExciteImpl::random_feature_params() const {
  if (!rf_) throw ConfigError("squeeze_excite: block has no random features");
  return {rf_projection_.to(torch::kFloat64), rf_phase_.to(torch::kFloat64), rf_->seed, rf_->sigma};
}

torch::Tensor SqueezeExciteImpl::channel_weights(const torch::Tensor& x) {
  require_rank4(x, "squeeze_excite");
  if (x.size(1) != channels_) {
    throw ShapeError("squeeze_excite: expected " + std::to_string(channels_) + " channels, got " +
                     std::to_string(x.size(1)));
  }
  auto z = x.mean({2, 3});
  if (rf_) {
    if (rf_->resample_per_forward && is_training()) {
      const uint64_t draw = resample_counter_.fetch_add(1);
      auto fresh = RandomFeatureParams::sample(rf_->dim, channels_, rf_->sigma, mix64(rf_->seed ^ mix64(draw + 1)));
      z = random_feature_map(z, fresh);
    } else {
      z = random_feature_map(z, rf_projection_, rf_phase_);
    }
  }
  return bounded_sigmoid(fc2_(torch::relu(fc1_(z))));
}

torch::Tensor SqueezeExciteImpl::forward(const torch::Tensor& x) {
  auto w = channel_weights(x);
  return x * w.unsqueeze(-1).unsqueeze(-1);
}

PsaImpl::PsaImpl(int64_t channels, const BlockConfig& cfg)
    : channels_(channels), groups_(cfg.psa_groups) {
  if (groups_ < 1 || channels % groups_ != 0) {
    throw ConfigError("psa: groups (" + std::to_string(groups_) + ") must divide channels (" +
                      std::to_string(channels) + ")");
  }
  if (static_cast<int64_t>(cfg.psa_kernel_sizes.size()) != groups_) {
    throw ConfigError("psa: need one kernel size per group");
  }
  const int64_t split = channels / groups_;
  for (int64_t i = 0; i < groups_; ++i) {
    const int64_t k = cfg.psa_kernel_sizes[i];
    if (k < 1 || k % 2 == 0) throw ConfigError("psa: kernel sizes must be odd");
    convs_.push_back(register_module("conv" + std::to_string(i),
                                     torch::nn::Conv2d(conv_options(split, split, k, false))));
  }
  const int64_t reduction = std::clamp<int64_t>(cfg.se_reduction, 1, split);
  se_ = register_module("se", SqueezeExcite(split, reduction));
}

PsaImpl::Output PsaImpl::decompose(const torch::Tensor& x) {
  require_rank4(x, "psa");
  if (x.size(1) != channels_) {
    throw ShapeError("psa: expected " + std::to_string(channels_) + " channels, got " +
                     std::to_string(x.size(1)));
  }
  auto chunks = x.chunk(groups_, 1);
  std::vector<torch::Tensor> feats;
  std::vector<torch::Tensor> gates;
  feats.reserve(groups_);
  gates.reserve(groups_);
  for (int64_t i = 0; i < groups_; ++i) {
    feats.push_back(convs_[i](chunks[i]));
    gates.push_back(se_->channel_weights(feats.back()));
  }
  auto features = torch::stack(feats, 1);
  auto weights = torch::softmax(torch::stack(gates, 1), 1);
  return {features, weights};
}

torch::Tensor PsaImpl::forward(const torch::Tensor& x) {
  auto parts = decompose(x);
  auto scaled = parts.features * parts.weights.unsqueeze(-1).unsqueeze(-1);
  return scaled.flatten(1, 2);
}

}  // namespace vertseg
