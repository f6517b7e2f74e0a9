#pragma once

#include <torch/torch.h>

#include <array>
#include <atomic>
#include <cstdint>
#include <mutex>
#include <optional>
#include <set>
#include <utility>
#include <vector>

namespace vertseg {

// Floor applied to sigmoid/softmax outputs so attention weights and masks stay
// strictly inside (0, 1).
inline constexpr double kProbabilityFloor = 1e-7;

torch::Tensor bounded_sigmoid(const torch::Tensor& x);

struct BlockConfig {
  int64_t out_channels = 64;
  // Rate 0 is the 1x1 branch; rates 1..3 are the dilated 3x3 branches. The
  // fifth ASPP branch is the image-pooling one.
  std::array<int64_t, 4> aspp_rates{1, 6, 12, 18};
  int64_t psa_groups = 4;
  std::vector<int64_t> psa_kernel_sizes{3, 5, 7, 9};
  int64_t se_reduction = 8;
  int64_t rf_dim = 64;
  double rf_sigma = 1.0;
  bool rf_resample_per_forward = false;
  int64_t spatial_kernel = 7;

  // Throws ConfigError on invariant violations.
  void validate() const;
};

/// Two 3x3 conv + batch-norm + ReLU layers. Spatial size is preserved and the
/// output is nonnegative.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in_channels, int64_t out_channels);

  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d first_conv() const { return conv1_; }

 private:
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
  torch::nn::BatchNorm2d bn2_{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Atrous spatial pyramid pooling: a 1x1 branch, three dilated 3x3 branches and
/// a global-pooled branch, concatenated and projected to `out_channels`.
///
/// Dilation rates that reach past the feature map are clamped to
/// min(H, W) - 1 at forward time; a warning is emitted once per input size.
class AsppImpl : public torch::nn::Module {
 public:
  AsppImpl(int64_t in_channels, const BlockConfig& cfg);

  torch::Tensor forward(const torch::Tensor& x);

  // The image-pooling branch broadcast back to H x W.
  torch::Tensor pooled_branch(const torch::Tensor& x);

  // Rates actually used for an H x W input.
  std::array<int64_t, 4> effective_rates(int64_t height, int64_t width) const;

 private:
  std::array<int64_t, 4> rates_;
  torch::nn::Conv2d conv1x1_{nullptr};
  torch::nn::BatchNorm2d bn1x1_{nullptr};
  std::vector<torch::nn::Conv2d> dilated_;
  std::vector<torch::nn::BatchNorm2d> dilated_bn_;
  torch::nn::Conv2d pool_conv_{nullptr};
  torch::nn::Conv2d project_{nullptr};
  torch::nn::BatchNorm2d project_bn_{nullptr};

  std::mutex warned_mutex_;
  std::set<std::pair<int64_t, int64_t>> warned_sizes_;
};
TORCH_MODULE(Aspp);

/// Spatial half of CBAM. The attention map is
/// sigmoid(conv_k(cat(mean_c(F), max_c(F)))) with shape N x 1 x H x W, and the
/// refined features are the map broadcast-multiplied into F.
class SpatialAttentionImpl : public torch::nn::Module {
 public:
  explicit SpatialAttentionImpl(int64_t kernel_size = 7);

  struct Output {
    torch::Tensor refined;
    torch::Tensor attention;
  };

  Output forward_with_map(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x) { return forward_with_map(x).refined; }

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(SpatialAttention);

/// Random Fourier feature parameters for a Gaussian kernel of bandwidth sigma.
/// Projection rows are N(0, 1/sigma^2) draws and phases are U[0, 2*pi).
struct RandomFeatureParams {
  torch::Tensor projection;  // D x d, float64
  torch::Tensor phase;       // D, float64
  uint64_t seed = 0;
  double sigma = 1.0;

  int64_t output_dim() const { return projection.size(0); }
  int64_t input_dim() const { return projection.size(1); }

  static RandomFeatureParams sample(int64_t output_dim, int64_t input_dim, double sigma,
                                    uint64_t seed);
};

// sqrt(2/D) * cos(v W^T + b) applied over the last dimension of v.
torch::Tensor random_feature_map(const torch::Tensor& v, const RandomFeatureParams& params);
torch::Tensor random_feature_map(const torch::Tensor& v, const torch::Tensor& projection,
                                 const torch::Tensor& phase);

struct RandomFeatureOptions {
  int64_t dim = 64;
  double sigma = 1.0;
  uint64_t seed = 0;
  bool resample_per_forward = false;
};

/// Squeeze-and-excitation channel gate. With random features enabled the pooled
/// channel descriptor is lifted through a frozen random Fourier map before the
/// two dense layers.
class SqueezeExciteImpl : public torch::nn::Module {
 public:
  SqueezeExciteImpl(int64_t channels, int64_t reduction,
                    std::optional<RandomFeatureOptions> random_features = std::nullopt);

  torch::Tensor forward(const torch::Tensor& x);

  // Per-channel gates in (0, 1), shape N x C.
  torch::Tensor channel_weights(const torch::Tensor& x);

  bool uses_random_features() const { return rf_.has_value(); }
  RandomFeatureParams random_feature_params() const;

 private:
  int64_t channels_;
  std::optional<RandomFeatureOptions> rf_;
  torch::Tensor rf_projection_;
  torch::Tensor rf_phase_;
  std::atomic<uint64_t> resample_counter_{0};
  torch::nn::Linear fc1_{nullptr};
  torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(SqueezeExcite);

/// Pyramid squeeze attention. Channels are split into S groups, each group is
/// convolved at its own kernel size, a shared squeeze-excite gate scores every
/// group, and a softmax across groups normalises the gates per channel slot.
class PsaImpl : public torch::nn::Module {
 public:
  PsaImpl(int64_t channels, const BlockConfig& cfg);

  struct Output {
    torch::Tensor features;  // N x S x C/S x H x W, before attention
    torch::Tensor weights;   // N x S x C/S, softmax over S
  };

  Output decompose(const torch::Tensor& x);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t groups() const { return groups_; }

 private:
  int64_t channels_;
  int64_t groups_;
  std::vector<torch::nn::Conv2d> convs_;
  SqueezeExcite se_{nullptr};
};
TORCH_MODULE(Psa);

}  // namespace vertseg
