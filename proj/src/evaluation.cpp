#include "vertseg/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "vertseg/error.hpp"
#include "vertseg/image_io.hpp"
#include "vertseg/training.hpp"

namespace fs = std::filesystem;

namespace vertseg {

std::string_view to_string(Averaging a) { return a == Averaging::Micro ? "micro" : "macro"; }

Averaging parse_averaging(std::string_view name) {
  if (name == "micro") return Averaging::Micro;
  if (name == "macro") return Averaging::Macro;
  throw ConfigError("unknown averaging '" + std::string(name) + "' (expected micro or macro)");
}

Predictor mask2_predictor(DoubleUNet model) {
  return [model](const torch::Tensor& x) mutable {
    const bool was_training = model->is_training();
    model->eval();
    torch::NoGradGuard no_grad;
    auto out = model->forward(x).mask2;
    model->train(was_training);
    return out;
  };
}

ReportRow evaluate(const Predictor& predict, const std::vector<SliceSample>& samples, Plane plane, Phase phase,
                   const std::string& model_name, const EvaluateOptions& options) {
  std::vector<SliceSample> selected;
  for (const auto& s : samples) {
    if (s.plane == plane && s.phase == phase) selected.push_back(s);
  }
  if (selected.empty()) {
    throw Error("no " + std::string(to_string(phase)) + " slices for plane " + std::string(to_string(plane)));
  }
  const int64_t h = options.height > 0 ? options.height : selected.front().image.size(0);
  const int64_t w = options.width > 0 ? options.width : selected.front().image.size(1);
  const auto bs = static_cast<size_t>(std::max<int64_t>(1, options.batch_size));

  ReportRow row;
  row.model = model_name;
  row.plane = plane;
  row.phase = phase;
  double sum_p = 0, sum_r = 0, sum_f = 0;
  for (size_t b = 0; b < selected.size(); b += bs) {
    const size_t e = std::min(selected.size(), b + bs);
    auto [x, y] = eval_batch(selected, b, e, h, w, options.normalize);
    auto prob = predict(x);
    for (size_t i = 0; i < e - b; ++i) {
      auto c = confusion_counts(prob[static_cast<int64_t>(i)], y[static_cast<int64_t>(i)], options.threshold);
      row.counts += c;
      if (options.averaging == Averaging::Macro) {
        auto m = metrics_from_counts(c);
        sum_p += m.precision, sum_r += m.recall, sum_f += m.f1;
        row.metrics.flags |= m.flags;
      }
    }
  }
  if (options.averaging == Averaging::Micro) {
    row.metrics = metrics_from_counts(row.counts);
  } else {
    const auto n = static_cast<double>(selected.size());
    row.metrics.precision = sum_p / n;
    row.metrics.recall = sum_r / n;
    row.metrics.f1 = sum_f / n;
  }
  return row;
}

ReportRow evaluate(DoubleUNet& model, const std::vector<SliceSample>& samples, Plane plane, Phase phase,
                   const EvaluateOptions& options) {
  auto opts = options;
  if (opts.height == 0) opts.height = model->config().input_height;
  if (opts.width == 0) opts.width = model->config().input_width;
  return evaluate(mask2_predictor(model), samples, plane, phase, std::string(to_string(model->architecture())),
                  opts);
}

std::string model_display_name(const std::string& tag) {
  if (tag == "baseline") return std::string(display_name(Architecture::Baseline));
  if (tag == "plusplus") return std::string(display_name(Architecture::PlusPlus));
  return tag;
}

std::string MetricsReport::to_csv() const {
  std::string out = "model,plane,phase,precision,recall,f1,tp,fp,tn,fn,flags\n";
  char line[512];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%s,%s,%.4f,%.4f,%.4f,%lld,%lld,%lld,%lld,%s\n", r.model.c_str(),
                  std::string(to_string(r.plane)).c_str(), std::string(to_string(r.phase)).c_str(),
                  100.0 * r.metrics.precision, 100.0 * r.metrics.recall, 100.0 * r.metrics.f1,
                  static_cast<long long>(r.counts.tp), static_cast<long long>(r.counts.fp),
                  static_cast<long long>(r.counts.tn), static_cast<long long>(r.counts.fn),
                  r.metrics.flag_string().c_str());
    out += line;
  }
  return out;
}

namespace {

int model_rank(const std::string& tag) { return tag == "baseline" ? 0 : tag == "plusplus" ? 1 : 2; }

unsigned parse_flags(const std::string& s) {
  unsigned f = 0;
  if (s.find("precision_undefined") != std::string::npos) f |= kPrecisionUndefined;
  if (s.find("recall_undefined") != std::string::npos) f |= kRecallUndefined;
  if (s.find("f1_undefined") != std::string::npos) f |= kF1Undefined;
  return f;
}

}  // namespace

std::string MetricsReport::to_markdown() const {
  auto sorted = rows;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.plane != b.plane) return a.plane < b.plane;
    if (model_rank(a.model) != model_rank(b.model)) return model_rank(a.model) < model_rank(b.model);
    return a.phase < b.phase;
  });
  std::string out = "| Plane | Model | Phase | Precision | Recall | F1 |\n|---|---|---|---|---|---|\n";
  char line[512];
  for (const auto& r : sorted) {
    std::string phase(to_string(r.phase));
    phase[0] = static_cast<char>(std::toupper(phase[0]));
    std::string f1 = [&] {
      char b[32];
      std::snprintf(b, sizeof b, "%.2f", 100.0 * r.metrics.f1);
      return std::string(b);
    }();
    if (r.metrics.flags) f1 += "*";
    std::snprintf(line, sizeof line, "| %s | %s | %s | %.2f | %.2f | %s |\n",
                  std::string(display_name(r.plane)).c_str(), model_display_name(r.model).c_str(), phase.c_str(),
                  100.0 * r.metrics.precision, 100.0 * r.metrics.recall, f1.c_str());
    out += line;
  }
  bool flagged = std::any_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.metrics.flags != 0; });
  if (flagged) out += "\n\\* at least one metric had a zero denominator and is reported as 0.\n";
  return out;
}

MetricsReport MetricsReport::from_csv(const std::string& text) {
  MetricsReport report;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("model,plane,phase,precision,recall,f1,tp,fp,tn,fn", 0) != 0) {
    throw FormatError("not a metrics CSV (unexpected header)");
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 11) throw FormatError("metrics CSV line " + std::to_string(lineno) + " has " +
                                          std::to_string(f.size()) + " fields, expected 11");
    try {
      ReportRow r;
      r.model = f[0];
      r.plane = parse_plane(f[1]);
      r.phase = parse_phase(f[2]);
      r.metrics.precision = std::stod(f[3]) / 100.0;
      r.metrics.recall = std::stod(f[4]) / 100.0;
      r.metrics.f1 = std::stod(f[5]) / 100.0;
      r.counts = {std::stoll(f[6]), std::stoll(f[7]), std::stoll(f[8]), std::stoll(f[9])};
      r.metrics.flags = parse_flags(f[10]);
      report.rows.push_back(r);
    } catch (const std::logic_error&) {
      throw FormatError("metrics CSV line " + std::to_string(lineno) + " is malformed");
    }
  }
  return report;
}

void MetricsReport::write(const fs::path& dir, const std::string& stem) const {
  fs::create_directories(dir);
  auto put = [&](const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
  };
  put(dir / (stem + ".csv"), to_csv());
  put(dir / (stem + ".md"), to_markdown());
  put(dir / (stem + ".provenance.json"), provenance.dump(2) + "\n");
}

void export_qualitative(DoubleUNet baseline, DoubleUNet plusplus, const std::vector<SliceSample>& samples,
                        const fs::path& out_png, const EvaluateOptions& options) {
  if (samples.empty()) throw Error("export_qualitative needs at least one sample");
  const int64_t h = options.height > 0 ? options.height : plusplus->config().input_height;
  const int64_t w = options.width > 0 ? options.width : plusplus->config().input_width;
  const int cols = 5;
  Raster grid(static_cast<int>(w) * cols, static_cast<int>(h * static_cast<int64_t>(samples.size())), 1, 0);
  auto paste = [&](const torch::Tensor& binary, int row, int col) {
    auto bytes = (binary.reshape({h, w}) * 255).to(torch::kUInt8).contiguous();
    const auto* src = bytes.data_ptr<uint8_t>();
    for (int64_t y = 0; y < h; ++y) {
      std::copy(src + y * w, src + (y + 1) * w, grid.at(static_cast<int>(col * w), static_cast<int>(row * h + y)));
    }
  };
  auto run = [&](DoubleUNet& m, const torch::Tensor& x) {
    const bool was_training = m->is_training();
    m->eval();
    torch::NoGradGuard no_grad;
    auto out = m->forward(x);
    m->train(was_training);
    return out;
  };
  for (size_t i = 0; i < samples.size(); ++i) {
    auto [x, y] = eval_batch(samples, i, i + 1, h, w, options.normalize);
    auto b = run(baseline, x);
    auto p = run(plusplus, x);
    const int row = static_cast<int>(i);
    paste((b.mask1 >= options.threshold).to(torch::kFloat32), row, 0);
    paste((b.mask2 >= options.threshold).to(torch::kFloat32), row, 1);
    paste((p.mask1 >= options.threshold).to(torch::kFloat32), row, 2);
    paste((p.mask2 >= options.threshold).to(torch::kFloat32), row, 3);
    paste(y, row, 4);
  }
  write_png(grid, out_png);
}

}  // namespace vertseg
