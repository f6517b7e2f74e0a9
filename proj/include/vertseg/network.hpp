#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "vertseg/blocks.hpp"

namespace vertseg {

enum class Architecture { PlusPlus, Baseline };

// "plusplus" / "baseline"; the tag stored in weight archives and reports.
std::string_view to_string(Architecture arch);
Architecture parse_architecture(std::string_view tag);
// "DoubleU-Net++" / "DoubleU-Net".
std::string_view display_name(Architecture arch);

enum class Scale { Full, Desk };
std::string_view to_string(Scale scale);
Scale parse_scale(std::string_view name);

// Which decoder stages of the ++ network lift their squeeze-excite descriptor
// through random features.
enum class RfPlacement { AllDecoderStages, LastStageOnly };
std::string_view to_string(RfPlacement placement);
RfPlacement parse_rf_placement(std::string_view name);

// Desk scale divides widths and block depths by this (depths rounded up).
inline constexpr int64_t kDeskDivisor = 4;
// Four 2x downsamplings between the input and the bottleneck.
inline constexpr int64_t kSpatialMultiple = 16;

struct DenseEncoderSpec {
  int64_t init_features = 64;
  int64_t growth_rate = 32;
  int64_t bn_size = 4;
  std::array<int64_t, 4> block_depths{6, 12, 24, 16};
  double compression = 0.5;
};

struct VggEncoderSpec {
  std::array<int64_t, 5> widths{64, 128, 256, 512, 512};
  std::array<int64_t, 5> depths{2, 2, 4, 4, 4};
};

struct ModelConfig {
  Architecture architecture = Architecture::PlusPlus;
  Scale scale = Scale::Full;
  int64_t input_height = 256;
  int64_t input_width = 256;
  int64_t in_channels = 1;
  DenseEncoderSpec dense;
  VggEncoderSpec vgg;
  std::array<int64_t, 4> encoder2_channels{32, 64, 128, 256};
  std::array<int64_t, 4> decoder_channels{256, 128, 64, 32};
  BlockConfig block;
  RfPlacement rf_placement = RfPlacement::AllDecoderStages;
  uint64_t rf_seed = 0;
  uint64_t init_seed = 0;

  static ModelConfig full(Architecture arch);
  static ModelConfig desk(Architecture arch);

  void validate() const;
};

struct NetworkOutput {
  torch::Tensor mask1;  // Network 1, N x 1 x H x W
  torch::Tensor mask2;  // Network 2, the final prediction
  torch::Tensor network2_input;  // image * mask1
};

struct EncoderFeatures {
  std::array<torch::Tensor, 4> skips;  // full, 1/2, 1/4, 1/8 resolution
  torch::Tensor bottleneck;            // 1/16 resolution
};

/// First encoder of the stacked pair; DenseNet-style for ++ and VGG-style for
/// the baseline.
class Encoder1Impl : public torch::nn::Module {
 public:
  virtual EncoderFeatures forward(const torch::Tensor& x) = 0;
  virtual std::array<int64_t, 4> skip_channels() const = 0;
  virtual int64_t out_channels() const = 0;
  virtual torch::nn::Conv2d first_conv() const = 0;
};

class DenseEncoderImpl : public Encoder1Impl {
 public:
  DenseEncoderImpl(int64_t in_channels, const DenseEncoderSpec& spec);

  EncoderFeatures forward(const torch::Tensor& x) override;
  std::array<int64_t, 4> skip_channels() const override { return skip_channels_; }
  int64_t out_channels() const override { return out_channels_; }
  torch::nn::Conv2d first_conv() const override { return stem_; }

 private:
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  std::vector<torch::nn::Sequential> blocks_;
  std::vector<torch::nn::Sequential> transitions_;
  torch::nn::BatchNorm2d final_bn_{nullptr};
  std::array<int64_t, 4> skip_channels_{};
  int64_t out_channels_ = 0;
};

class VggEncoderImpl : public Encoder1Impl {
 public:
  VggEncoderImpl(int64_t in_channels, const VggEncoderSpec& spec);

  EncoderFeatures forward(const torch::Tensor& x) override;
  std::array<int64_t, 4> skip_channels() const override { return skip_channels_; }
  int64_t out_channels() const override { return out_channels_; }
  torch::nn::Conv2d first_conv() const override { return first_; }

 private:
  std::vector<torch::nn::Sequential> stages_;
  torch::nn::Conv2d first_{nullptr};
  std::array<int64_t, 4> skip_channels_{};
  int64_t out_channels_ = 0;
};

/// Upsample x2, concatenate skips, conv block, squeeze-excite.
class DecoderStageImpl : public torch::nn::Module {
 public:
  DecoderStageImpl(int64_t in_channels, int64_t out_channels, int64_t se_reduction,
                   std::optional<RandomFeatureOptions> random_features);

  torch::Tensor forward(const torch::Tensor& x, const std::vector<torch::Tensor>& skips);

  const SqueezeExcite& squeeze() const { return se_; }

 private:
  ConvBlock conv_{nullptr};
  SqueezeExcite se_{nullptr};
};
TORCH_MODULE(DecoderStage);

/// Two stacked encoder-decoder networks. Network 2 sees the image gated by
/// Network 1's mask, and its decoder concatenates the skips of both encoders.
class DoubleUNetImpl : public torch::nn::Module {
 public:
  explicit DoubleUNetImpl(const ModelConfig& cfg);

  // x: N x C x H x W with H and W multiples of 16.
  NetworkOutput forward(const torch::Tensor& x);

  const ModelConfig& config() const { return cfg_; }
  Architecture architecture() const { return cfg_.architecture; }

  // First convolution of encoder 1 (the deepest point of the gradient path).
  torch::nn::Conv2d encoder1_first_conv() const { return encoder1_->first_conv(); }
  const std::vector<DecoderStage>& decoder1() const { return decoder1_; }
  const std::vector<DecoderStage>& decoder2() const { return decoder2_; }

 private:
  torch::Tensor refine(const torch::Tensor& x, int network);

  ModelConfig cfg_;
  std::shared_ptr<Encoder1Impl> encoder1_;
  Aspp aspp1_{nullptr};
  SpatialAttention attention1_{nullptr};
  Psa psa1_{nullptr};
  std::vector<DecoderStage> decoder1_;
  torch::nn::Conv2d head1_{nullptr};

  std::vector<ConvBlock> encoder2_;
  Aspp aspp2_{nullptr};
  SpatialAttention attention2_{nullptr};
  Psa psa2_{nullptr};
  std::vector<DecoderStage> decoder2_;
  torch::nn::Conv2d head2_{nullptr};
};
TORCH_MODULE(DoubleUNet);

// Builds with cfg.architecture forced to the requested variant. Parameter
// initialisation is seeded from cfg.init_seed.
DoubleUNet build_doubleunet_pp(ModelConfig cfg);
DoubleUNet build_doubleunet_baseline(ModelConfig cfg);
DoubleUNet build_model(const ModelConfig& cfg);

// Single-sample forward: image is C x H x W, masks come back 1 x H x W.
NetworkOutput forward(DoubleUNet& model, const torch::Tensor& image);

int64_t count_parameters(const torch::nn::Module& module);

}  // namespace vertseg
