#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>

namespace vertseg {

inline constexpr double kDefaultThreshold = 0.5;

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;

  int64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp, fp += o.fp, tn += o.tn, fn += o.fn;
    return *this;
  }
  friend ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Binarizes `pred` at `threshold` (ties count as foreground) and counts
/// against the binary `gt`. Shapes must match exactly.
ConfusionCounts confusion_counts(const torch::Tensor& pred, const torch::Tensor& gt,
                                 double threshold = kDefaultThreshold);

enum MetricFlag : unsigned {
  kPrecisionUndefined = 1u << 0,
  kRecallUndefined = 1u << 1,
  kF1Undefined = 1u << 2,
};

/// Ratios in [0, 1]. A metric whose denominator is zero is reported as 0 and
/// flagged.
struct Metrics {
  double precision = 0, recall = 0, f1 = 0;
  unsigned flags = 0;
  // "precision_undefined;recall_undefined" style, empty when clean.
  std::string flag_string() const;
};

Metrics metrics_from_counts(const ConfusionCounts& c);

}  // namespace vertseg
