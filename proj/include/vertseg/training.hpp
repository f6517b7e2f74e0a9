#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vertseg/archive.hpp"
#include "vertseg/augment.hpp"
#include "vertseg/metrics.hpp"
#include "vertseg/network.hpp"
#include "vertseg/slices.hpp"

namespace vertseg {

inline constexpr double kDiceSmooth = 1.0;

struct TrainConfig {
  int64_t epochs = 160;
  int64_t batch_size = 8;
  double lr_start = 1e-5;
  double lr_peak = 4.8e-4;
  double lr_final = 1.52e-4;
  double warmup_fraction = 0.1;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double w_bce = 1.0, w_dice = 1.0;
  bool supervise_mask1 = true;
  bool augment = true;
  AugmentationConfig aug;
  NormalizeOptions normalize;
  double threshold = kDefaultThreshold;
  uint64_t seed = 0;
  // Single-threaded, deterministic kernels.
  bool deterministic = true;

  // Epoch at which lr_peak is reached: ceil(warmup_fraction * epochs).
  int64_t warmup_end() const;
  void validate() const;
};

/// Linear from lr_start (epoch 0) to lr_peak (warmup_end), then exponential
/// decay to lr_final at epochs - 1. Anchor epochs return the anchor values
/// exactly.
double lr_at(int64_t epoch, const TrainConfig& cfg);

struct LossWeights {
  double bce = 1.0, dice = 1.0;
};

/// w_bce * BCE + w_dice * (1 - smooth Dice), each computed per sample over all
/// non-batch dimensions and averaged over the batch. Predictions are clamped
/// to [1e-7, 1 - 1e-7].
torch::Tensor bce_dice_loss(const torch::Tensor& pred, const torch::Tensor& target, LossWeights weights = {});

struct EpochRecord {
  int64_t epoch = 0;
  double lr = 0;
  double train_loss = 0, train_f1 = 0;
  double valid_loss = 0, valid_f1 = 0;
  double wall_time = 0;  // seconds since the start of the run, excluding earlier sessions
};

struct TrainHistory {
  std::vector<EpochRecord> records;

  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

struct SliceDataset {
  std::vector<SliceSample> train;
  std::vector<SliceSample> valid;
};

struct TrainOptions {
  // When set, a checkpoint is written there after every epoch.
  std::optional<std::filesystem::path> checkpoint_dir;
  // Continue from the checkpoint in checkpoint_dir if one exists.
  bool resume = false;
  // Stop (after checkpointing) once this many epochs of the schedule are done.
  std::optional<int64_t> stop_after;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  TrainHistory history;
  int64_t next_epoch = 0;
  int64_t best_epoch = -1;
  double best_valid_f1 = -1.0;
  // Parameters and buffers at the best validation F1 (final weights stay in the model).
  NamedTensors best_state;
};

/// Adam with the epoch-granular schedule; ceil(n / batch_size) steps per
/// epoch. Samples are normalized in train mode and optionally augmented, all
/// from streams keyed by (seed, sample, epoch). Validation runs every epoch
/// on `data.valid` (falls back to the training set when that is empty for
/// model selection).
TrainResult train(DoubleUNet& model, const SliceDataset& data, const TrainConfig& cfg,
                  const TrainOptions& options = {});

/// Stacks samples into N×1×H×W image and mask batches, resizing to `size`
/// where needed. Images are normalized in eval mode.
std::pair<torch::Tensor, torch::Tensor> eval_batch(const std::vector<SliceSample>& samples, size_t begin,
                                                   size_t end, int64_t height, int64_t width,
                                                   const NormalizeOptions& normalize = {});

// Mean loss and pooled counts of mask2 over a sample set, in eval mode.
struct EvalPass {
  double loss = 0;
  ConfusionCounts counts;
};
EvalPass evaluate_samples(DoubleUNet& model, const std::vector<SliceSample>& samples, const TrainConfig& cfg);

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace vertseg
