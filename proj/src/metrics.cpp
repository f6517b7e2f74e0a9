#include "vertseg/metrics.hpp"

#include <sstream>

#include "vertseg/error.hpp"

namespace vertseg {

ConfusionCounts confusion_counts(const torch::Tensor& pred, const torch::Tensor& gt, double threshold) {
  if (pred.sizes() != gt.sizes()) {
    std::ostringstream os;
    os << "confusion_counts: prediction shape " << pred.sizes() << " does not match ground truth " << gt.sizes();
    throw ShapeError(os.str());
  }
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  auto g = gt.to(torch::kFloat32);
  if (!((g == 0) | (g == 1)).all().item<bool>()) throw ShapeError("confusion_counts: ground truth must be binary");
  auto p = pred.detach().to(torch::kFloat64) >= threshold;
  auto t = g > 0.5;
  ConfusionCounts c;
  c.tp = (p & t).sum().item<int64_t>();
  c.fp = (p & ~t).sum().item<int64_t>();
  c.fn = (~p & t).sum().item<int64_t>();
  c.tn = pred.numel() - c.tp - c.fp - c.fn;
  return c;
}

std::string Metrics::flag_string() const {
  std::string out;
  auto add = [&](unsigned bit, const char* name) {
    if (!(flags & bit)) return;
    if (!out.empty()) out += ';';
    out += name;
  };
  add(kPrecisionUndefined, "precision_undefined");
  add(kRecallUndefined, "recall_undefined");
  add(kF1Undefined, "f1_undefined");
  return out;
}

Metrics metrics_from_counts(const ConfusionCounts& c) {
  if (c.tp < 0 || c.fp < 0 || c.tn < 0 || c.fn < 0) throw ConfigError("confusion counts must be nonnegative");
  Metrics m;
  auto ratio = [&](double num, double den, unsigned flag) {
    if (den == 0.0) {
      m.flags |= flag;
      return 0.0;
    }
    return num / den;
  };
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  m.precision = ratio(tp, tp + fp, kPrecisionUndefined);
  m.recall = ratio(tp, tp + fn, kRecallUndefined);
  m.f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn, kF1Undefined);
  return m;
}

}  // namespace vertseg
