#include "vertseg/network.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <sstream>

#include "vertseg/error.hpp"
#include "vertseg/rng.hpp"

namespace F = torch::nn::functional;

namespace vertseg {

std::string_view to_string(Architecture arch) {
  return arch == Architecture::PlusPlus ? "plusplus" : "baseline";
}

Architecture parse_architecture(std::string_view tag) {
  if (tag == "plusplus" || tag == "pp" || tag == "doubleunet++") return Architecture::PlusPlus;
  if (tag == "baseline" || tag == "doubleunet") return Architecture::Baseline;
  throw ConfigError("unknown architecture '" + std::string(tag) + "' (expected plusplus or baseline)");
}

std::string_view display_name(Architecture arch) {
  return arch == Architecture::PlusPlus ? "DoubleU-Net++" : "DoubleU-Net";
}

std::string_view to_string(Scale scale) { return scale == Scale::Full ? "full" : "desk"; }

Scale parse_scale(std::string_view name) {
  if (name == "full") return Scale::Full;
  if (name == "desk") return Scale::Desk;
  throw ConfigError("unknown scale '" + std::string(name) + "' (expected full or desk)");
}

std::string_view to_string(RfPlacement placement) {
  return placement == RfPlacement::AllDecoderStages ? "all" : "last";
}

RfPlacement parse_rf_placement(std::string_view name) {
  if (name == "all") return RfPlacement::AllDecoderStages;
  if (name == "last") return RfPlacement::LastStageOnly;
  throw ConfigError("unknown rf placement '" + std::string(name) + "' (expected all or last)");
}

ModelConfig ModelConfig::full(Architecture arch) {
  ModelConfig cfg;
  cfg.architecture = arch;
  return cfg;
}

ModelConfig ModelConfig::desk(Architecture arch) {
  ModelConfig cfg = full(arch);
  cfg.scale = Scale::Desk;
  auto shrink = [](int64_t w) { return std::max<int64_t>(1, w / kDeskDivisor); };
  auto shallow = [](int64_t d) { return std::max<int64_t>(1, (d + kDeskDivisor - 1) / kDeskDivisor); };
  cfg.input_height = cfg.input_height / kDeskDivisor;
  cfg.input_width = cfg.input_width / kDeskDivisor;
  cfg.dense.init_features = shrink(cfg.dense.init_features);
  cfg.dense.growth_rate = shrink(cfg.dense.growth_rate);
  for (auto& d : cfg.dense.block_depths) d = shallow(d);
  for (auto& w : cfg.vgg.widths) w = shrink(w);
  for (auto& d : cfg.vgg.depths) d = shallow(d);
  for (auto& w : cfg.encoder2_channels) w = shrink(w);
  for (auto& w : cfg.decoder_channels) w = shrink(w);
  cfg.block.out_channels = shrink(cfg.block.out_channels);
  cfg.block.rf_dim = shrink(cfg.block.rf_dim);
  return cfg;
}

void ModelConfig::validate() const {
  block.validate();
  if (in_channels < 1) throw ConfigError("in_channels must be positive");
  if (input_height < 1 || input_width < 1 || input_height % kSpatialMultiple != 0 ||
      input_width % kSpatialMultiple != 0) {
    throw ConfigError("input size must be a positive multiple of " + std::to_string(kSpatialMultiple));
  }
  auto positive = [](auto const& values, const char* what) {
    for (auto v : values) {
      if (v < 1) throw ConfigError(std::string(what) + " entries must be positive");
    }
  };
  positive(encoder2_channels, "encoder2_channels");
  positive(decoder_channels, "decoder_channels");
  if (architecture == Architecture::PlusPlus) {
    if (dense.init_features < 1 || dense.growth_rate < 1 || dense.bn_size < 1) {
      throw ConfigError("dense encoder widths must be positive");
    }
    positive(dense.block_depths, "dense block_depths");
    if (!(dense.compression > 0.0 && dense.compression <= 1.0)) {
      throw ConfigError("dense compression must be in (0, 1]");
    }
  } else {
    positive(vgg.widths, "vgg widths");
    positive(vgg.depths, "vgg depths");
  }
}

namespace {

std::mutex g_build_mutex;

torch::nn::Conv2dOptions conv3x3(int64_t in, int64_t out) {
  return torch::nn::Conv2dOptions(in, out, 3).padding(1).bias(false);
}

// BN-ReLU-Conv1x1-BN-ReLU-Conv3x3, output concatenated onto the input.
class DenseLayerImpl : public torch::nn::Module {
 public:
  DenseLayerImpl(int64_t in_channels, int64_t growth_rate, int64_t bn_size) {
    const int64_t inner = bn_size * growth_rate;
    bn1_ = register_module("bn1", torch::nn::BatchNorm2d(in_channels));
    conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, inner, 1).bias(false)));
    bn2_ = register_module("bn2", torch::nn::BatchNorm2d(inner));
    conv2_ = register_module("conv2", torch::nn::Conv2d(conv3x3(inner, growth_rate)));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = conv1_(torch::relu(bn1_(x)));
    y = conv2_(torch::relu(bn2_(y)));
    return torch::cat({x, y}, 1);
  }

 private:
  torch::nn::BatchNorm2d bn1_{nullptr};
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::BatchNorm2d bn2_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
};
TORCH_MODULE(DenseLayer);

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

torch::Tensor downsample2x(const torch::Tensor& x) {
  return F::max_pool2d(x, F::MaxPool2dFuncOptions(2).stride(2));
}

}  // namespace

DenseEncoderImpl::DenseEncoderImpl(int64_t in_channels, const DenseEncoderSpec& spec) {
  int64_t channels = spec.init_features;
  stem_ = register_module("stem", torch::nn::Conv2d(conv3x3(in_channels, channels)));
  stem_bn_ = register_module("stem_bn", torch::nn::BatchNorm2d(channels));
  skip_channels_[0] = channels;
  for (size_t b = 0; b < spec.block_depths.size(); ++b) {
    if (b > 0) {
      const auto compressed =
          std::max<int64_t>(1, static_cast<int64_t>(std::floor(static_cast<double>(channels) * spec.compression)));
      torch::nn::Sequential transition(
          torch::nn::BatchNorm2d(channels), torch::nn::ReLU(),
          torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, compressed, 1).bias(false)),
          torch::nn::AvgPool2d(torch::nn::AvgPool2dOptions(2).stride(2)));
      transitions_.push_back(register_module("transition" + std::to_string(b), transition));
      channels = compressed;
    }
    torch::nn::Sequential block;
    for (int64_t l = 0; l < spec.block_depths[b]; ++l) {
      block->push_back(DenseLayer(channels, spec.growth_rate, spec.bn_size));
      channels += spec.growth_rate;
    }
    blocks_.push_back(register_module("block" + std::to_string(b), block));
    if (b + 1 < spec.block_depths.size()) skip_channels_[b + 1] = channels;
  }
  final_bn_ = register_module("final_bn", torch::nn::BatchNorm2d(channels));
  out_channels_ = channels;
}

EncoderFeatures DenseEncoderImpl::forward(const torch::Tensor& x) {
  EncoderFeatures out;
  auto y = torch::relu(stem_bn_(stem_(x)));
  out.skips[0] = y;
  y = blocks_[0]->forward(downsample2x(y));
  out.skips[1] = y;
  for (size_t b = 1; b < blocks_.size(); ++b) {
    y = blocks_[b]->forward(transitions_[b - 1]->forward(y));
    if (b < 3) out.skips[b + 1] = y;
  }
  out.bottleneck = torch::relu(final_bn_(y));
  return out;
}

VggEncoderImpl::VggEncoderImpl(int64_t in_channels, const VggEncoderSpec& spec) {
  int64_t channels = in_channels;
  for (size_t s = 0; s < spec.widths.size(); ++s) {
    torch::nn::Sequential stage;
    for (int64_t l = 0; l < spec.depths[s]; ++l) {
      torch::nn::Conv2d conv(conv3x3(channels, spec.widths[s]));
      if (s == 0 && l == 0) first_ = conv;
      stage->push_back(conv);
      stage->push_back(torch::nn::BatchNorm2d(spec.widths[s]));
      stage->push_back(torch::nn::ReLU());
      channels = spec.widths[s];
    }
    stages_.push_back(register_module("stage" + std::to_string(s), stage));
    if (s < 4) skip_channels_[s] = channels;
  }
  out_channels_ = channels;
}

EncoderFeatures VggEncoderImpl::forward(const torch::Tensor& x) {
  EncoderFeatures out;
  auto y = x;
  for (size_t s = 0; s < stages_.size(); ++s) {
    if (s > 0) y = downsample2x(y);
    y = stages_[s]->forward(y);
    if (s < 4) out.skips[s] = y;
  }
  out.bottleneck = y;
  return out;
}

DecoderStageImpl::DecoderStageImpl(int64_t in_channels, int64_t out_channels, int64_t se_reduction,
                                   std::optional<RandomFeatureOptions> random_features) {
  conv_ = register_module("conv", ConvBlock(in_channels, out_channels));
  se_ = register_module("se", SqueezeExcite(out_channels, std::min(se_reduction, out_channels), random_features));
}

torch::Tensor DecoderStageImpl::forward(const torch::Tensor& x, const std::vector<torch::Tensor>& skips) {
  std::vector<torch::Tensor> parts{upsample2x(x)};
  parts.insert(parts.end(), skips.begin(), skips.end());
  return se_(conv_(torch::cat(parts, 1)));
}

DoubleUNetImpl::DoubleUNetImpl(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const bool plus = cfg_.architecture == Architecture::PlusPlus;
  const BlockConfig& blk = cfg_.block;

  if (plus) {
    encoder1_ = register_module<Encoder1Impl>("encoder1", std::make_shared<DenseEncoderImpl>(cfg_.in_channels, cfg_.dense));
  } else {
    encoder1_ = register_module<Encoder1Impl>("encoder1", std::make_shared<VggEncoderImpl>(cfg_.in_channels, cfg_.vgg));
  }
  const auto skips1 = encoder1_->skip_channels();

  auto rf_for = [&](int network, size_t stage) -> std::optional<RandomFeatureOptions> {
    if (!plus) return std::nullopt;
    if (cfg_.rf_placement == RfPlacement::LastStageOnly && !(network == 2 && stage == 3)) return std::nullopt;
    RandomFeatureOptions rf;
    rf.dim = blk.rf_dim;
    rf.sigma = blk.rf_sigma;
    rf.seed = mix64(cfg_.rf_seed ^ mix64(static_cast<uint64_t>(network * 16 + stage)));
    rf.resample_per_forward = blk.rf_resample_per_forward;
    return rf;
  };

  aspp1_ = register_module("aspp1", Aspp(encoder1_->out_channels(), blk));
  if (plus) {
    attention1_ = register_module("attention1", SpatialAttention(blk.spatial_kernel));
    psa1_ = register_module("psa1", Psa(blk.out_channels, blk));
  }
  int64_t channels = blk.out_channels;
  for (size_t i = 0; i < 4; ++i) {
    const int64_t in = channels + skips1[3 - i];
    decoder1_.push_back(register_module("decoder1_" + std::to_string(i),
                                        DecoderStage(in, cfg_.decoder_channels[i], blk.se_reduction, rf_for(1, i))));
    channels = cfg_.decoder_channels[i];
  }
  head1_ = register_module("head1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 1, 1)));

  int64_t enc_in = cfg_.in_channels;
  for (size_t i = 0; i < 4; ++i) {
    encoder2_.push_back(register_module("encoder2_" + std::to_string(i), ConvBlock(enc_in, cfg_.encoder2_channels[i])));
    enc_in = cfg_.encoder2_channels[i];
  }
  aspp2_ = register_module("aspp2", Aspp(enc_in, blk));
  if (plus) {
    attention2_ = register_module("attention2", SpatialAttention(blk.spatial_kernel));
    psa2_ = register_module("psa2", Psa(blk.out_channels, blk));
  }
  channels = blk.out_channels;
  for (size_t i = 0; i < 4; ++i) {
    const int64_t in = channels + skips1[3 - i] + cfg_.encoder2_channels[3 - i];
    decoder2_.push_back(register_module("decoder2_" + std::to_string(i),
                                        DecoderStage(in, cfg_.decoder_channels[i], blk.se_reduction, rf_for(2, i))));
    channels = cfg_.decoder_channels[i];
  }
  head2_ = register_module("head2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 1, 1)));
}

torch::Tensor DoubleUNetImpl::refine(const torch::Tensor& x, int network) {
  if (cfg_.architecture != Architecture::PlusPlus) return x;
  auto& attention = network == 1 ? attention1_ : attention2_;
  auto& psa = network == 1 ? psa1_ : psa2_;
  return psa(attention(x));
}

NetworkOutput DoubleUNetImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4 || x.size(1) != cfg_.in_channels) {
    std::ostringstream os;
    os << "forward: expected N x " << cfg_.in_channels << " x H x W input, got " << x.sizes();
    throw ShapeError(os.str());
  }
  if (x.size(2) % kSpatialMultiple != 0 || x.size(3) % kSpatialMultiple != 0 || x.size(2) == 0 ||
      x.size(3) == 0) {
    std::ostringstream os;
    os << "spatial size must be divisible by " << kSpatialMultiple << " (got " << x.size(2) << "x"
       << x.size(3) << ")";
    throw ShapeError(os.str());
  }

  NetworkOutput out;
  auto enc1 = encoder1_->forward(x);
  auto y = refine(aspp1_(enc1.bottleneck), 1);
  for (size_t i = 0; i < 4; ++i) y = decoder1_[i]->forward(y, {enc1.skips[3 - i]});
  out.mask1 = bounded_sigmoid(head1_(y));

  out.network2_input = x * out.mask1;
  std::array<torch::Tensor, 4> skips2;
  y = out.network2_input;
  for (size_t i = 0; i < 4; ++i) {
    skips2[i] = encoder2_[i](y);
    y = downsample2x(skips2[i]);
  }
  y = refine(aspp2_(y), 2);
  for (size_t i = 0; i < 4; ++i) y = decoder2_[i]->forward(y, {enc1.skips[3 - i], skips2[3 - i]});
  out.mask2 = bounded_sigmoid(head2_(y));
  return out;
}

DoubleUNet build_model(const ModelConfig& cfg) {
  cfg.validate();
  std::lock_guard lock(g_build_mutex);
  torch::manual_seed(cfg.init_seed);
  return DoubleUNet(cfg);
}

DoubleUNet build_doubleunet_pp(ModelConfig cfg) {
  cfg.architecture = Architecture::PlusPlus;
  return build_model(cfg);
}

DoubleUNet build_doubleunet_baseline(ModelConfig cfg) {
  cfg.architecture = Architecture::Baseline;
  return build_model(cfg);
}

NetworkOutput forward(DoubleUNet& model, const torch::Tensor& image) {
  if (image.dim() != 3) {
    std::ostringstream os;
    os << "forward: expected a C x H x W image, got " << image.sizes();
    throw ShapeError(os.str());
  }
  auto out = model->forward(image.unsqueeze(0));
  return {out.mask1.squeeze(0), out.mask2.squeeze(0), out.network2_input.squeeze(0)};
}

int64_t count_parameters(const torch::nn::Module& module) {
  int64_t total = 0;
  for (const auto& p : module.parameters()) {
    if (p.requires_grad()) total += p.numel();
  }
  return total;
}

}  // namespace vertseg
