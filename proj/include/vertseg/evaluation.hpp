#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vertseg/metrics.hpp"
#include "vertseg/network.hpp"
#include "vertseg/slices.hpp"

namespace vertseg {

enum class Averaging { Micro, Macro };
std::string_view to_string(Averaging a);
Averaging parse_averaging(std::string_view name);

/// Maps an N×1×H×W batch of normalized images to N×1×H×W probabilities.
using Predictor = std::function<torch::Tensor(const torch::Tensor&)>;

// Eval-mode, no-grad predictor returning mask2.
Predictor mask2_predictor(DoubleUNet model);

struct ReportRow {
  std::string model;  // architecture tag: "baseline" or "plusplus"
  Plane plane = Plane::Sagittal;
  Phase phase = Phase::Valid;
  Metrics metrics;  // ratios in [0, 1]
  ConfusionCounts counts;
};

struct EvaluateOptions {
  double threshold = kDefaultThreshold;
  Averaging averaging = Averaging::Micro;
  int64_t batch_size = 8;
  int64_t height = 0, width = 0;  // 0: take the sample size
  NormalizeOptions normalize;
};

/// Scores the slices of one plane and phase. Micro pools the counts of all
/// pixels of all slices; macro averages per-slice metrics. `counts` are the
/// pooled counts in both modes.
ReportRow evaluate(const Predictor& predict, const std::vector<SliceSample>& samples, Plane plane, Phase phase,
                   const std::string& model_name, const EvaluateOptions& options = {});
ReportRow evaluate(DoubleUNet& model, const std::vector<SliceSample>& samples, Plane plane, Phase phase,
                   const EvaluateOptions& options = {});

struct MetricsReport {
  std::vector<ReportRow> rows;
  // Config hash, dataset id, timestamp. Kept out of the CSV so that it stays
  // byte-identical for identical inputs.
  nlohmann::json provenance = nlohmann::json::object();

  // model,plane,phase,precision,recall,f1,tp,fp,tn,fn,flags (percentages).
  std::string to_csv() const;
  // | Plane | Model | Phase | Precision | Recall | F1 | ordered by plane, model, phase.
  std::string to_markdown() const;
  static MetricsReport from_csv(const std::string& text);

  // Writes <stem>.csv, <stem>.md and <stem>.provenance.json.
  void write(const std::filesystem::path& dir, const std::string& stem = "metrics") const;
};

std::string model_display_name(const std::string& tag);

/// One PNG with a row per sample: baseline mask1, baseline mask2, ++ mask1,
/// ++ mask2, ground truth. Masks are binarized at the threshold and written as
/// 0/255 grayscale.
void export_qualitative(DoubleUNet baseline, DoubleUNet plusplus, const std::vector<SliceSample>& samples,
                        const std::filesystem::path& out_png, const EvaluateOptions& options = {});

}  // namespace vertseg
