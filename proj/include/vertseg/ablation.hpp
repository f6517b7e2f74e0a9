#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vertseg/evaluation.hpp"
#include "vertseg/training.hpp"

namespace vertseg {

struct AblationConfig {
  std::vector<uint64_t> seeds{0, 1, 2};
  Scale scale = Scale::Desk;
  TrainConfig train;  // `augment` is overridden per run
  EvaluateOptions eval;
};

struct AblationRun {
  std::string model;
  bool augmentation = false;
  uint64_t seed = 0;
  TrainHistory history;
  std::vector<ReportRow> rows;  // plane x {valid, test}
};

struct AblationSummaryRow {
  std::string model;
  bool augmentation = false;
  Plane plane = Plane::Sagittal;
  Phase phase = Phase::Valid;
  Metrics metrics;  // mean over seeds
  ConfusionCounts counts;  // summed over seeds
};

struct AblationResult {
  std::vector<AblationRun> runs;

  // One row per (model, augmentation, plane, phase), ordered that way.
  std::vector<AblationSummaryRow> summary() const;
  // Mean valid F1 over seeds and planes.
  double mean_valid_f1(const std::string& model, bool augmentation) const;

  // model,augmentation,plane,phase,precision,recall,f1,tp,fp,tn,fn,flags
  std::string to_csv() const;
  // seed,model,augmentation,plane,phase,precision,recall,f1,tp,fp,tn,fn,flags
  std::string runs_csv() const;
  std::string to_markdown() const;

  // ablation.csv, ablation_runs.csv, ablation.md and one bar chart per phase
  // (ablation_<phase>_f1.png; bars: baseline off/on, plusplus off/on per plane).
  void write(const std::filesystem::path& dir) const;
};

/// Trains baseline and ++ with augmentation on and off for every seed (four
/// runs per seed, identical data and seeds inside a seed), each on the train
/// slices of all planes, then scores the best-validation weights on every
/// plane of the valid and test phases.
AblationResult run_ablation(const AblationConfig& config, const std::vector<SliceSample>& dataset,
                            const std::function<void(const AblationRun&)>& on_run = {});

}  // namespace vertseg
