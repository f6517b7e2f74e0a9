#include "vertseg/ablation.hpp"

#include <cstdio>
#include <fstream>
#include <map>

#include "vertseg/archive.hpp"
#include "vertseg/error.hpp"
#include "vertseg/image_io.hpp"
#include "vertseg/log.hpp"

namespace fs = std::filesystem;

namespace vertseg {

namespace {

constexpr std::array<const char*, 2> kModels{"baseline", "plusplus"};
constexpr std::array<Phase, 2> kScoredPhases{Phase::Valid, Phase::Test};

std::string format_row(const std::string& prefix, const Metrics& m, const ConfusionCounts& c) {
  char line[512];
  std::snprintf(line, sizeof line, "%s,%.4f,%.4f,%.4f,%lld,%lld,%lld,%lld,%s\n", prefix.c_str(),
                100.0 * m.precision, 100.0 * m.recall, 100.0 * m.f1, static_cast<long long>(c.tp),
                static_cast<long long>(c.fp), static_cast<long long>(c.tn), static_cast<long long>(c.fn),
                m.flag_string().c_str());
  return line;
}

std::string on_off(bool aug) { return aug ? "on" : "off"; }

}  // namespace

std::vector<AblationSummaryRow> AblationResult::summary() const {
  std::vector<AblationSummaryRow> out;
  for (const char* model : kModels) {
    for (bool aug : {true, false}) {
      for (Plane plane : kAllPlanes) {
        for (Phase phase : kScoredPhases) {
          AblationSummaryRow s{model, aug, plane, phase, {}, {}};
          int n = 0;
          for (const auto& run : runs) {
            if (run.model != model || run.augmentation != aug) continue;
            for (const auto& r : run.rows) {
              if (r.plane != plane || r.phase != phase) continue;
              s.metrics.precision += r.metrics.precision;
              s.metrics.recall += r.metrics.recall;
              s.metrics.f1 += r.metrics.f1;
              s.metrics.flags |= r.metrics.flags;
              s.counts += r.counts;
              ++n;
            }
          }
          if (n == 0) continue;
          s.metrics.precision /= n;
          s.metrics.recall /= n;
          s.metrics.f1 /= n;
          out.push_back(s);
        }
      }
    }
  }
  return out;
}

double AblationResult::mean_valid_f1(const std::string& model, bool augmentation) const {
  double sum = 0;
  int n = 0;
  for (const auto& run : runs) {
    if (run.model != model || run.augmentation != augmentation) continue;
    for (const auto& r : run.rows) {
      if (r.phase != Phase::Valid) continue;
      sum += r.metrics.f1;
      ++n;
    }
  }
  if (n == 0) throw Error("no valid rows for " + model + " with augmentation " + on_off(augmentation));
  return sum / n;
}

std::string AblationResult::to_csv() const {
  std::string out = "model,augmentation,plane,phase,precision,recall,f1,tp,fp,tn,fn,flags\n";
  for (const auto& s : summary()) {
    out += format_row(s.model + "," + on_off(s.augmentation) + "," + std::string(to_string(s.plane)) + "," +
                          std::string(to_string(s.phase)),
                      s.metrics, s.counts);
  }
  return out;
}

std::string AblationResult::runs_csv() const {
  std::string out = "seed,model,augmentation,plane,phase,precision,recall,f1,tp,fp,tn,fn,flags\n";
  for (const auto& run : runs) {
    for (const auto& r : run.rows) {
      out += format_row(std::to_string(run.seed) + "," + run.model + "," + on_off(run.augmentation) + "," +
                            std::string(to_string(r.plane)) + "," + std::string(to_string(r.phase)),
                        r.metrics, r.counts);
    }
  }
  return out;
}

std::string AblationResult::to_markdown() const {
  std::string out = "| Model | Augmentation | Plane | Phase | Precision | Recall | F1 |\n|---|---|---|---|---|---|---|\n";
  char line[512];
  for (const auto& s : summary()) {
    std::snprintf(line, sizeof line, "| %s | %s | %s | %s | %.2f | %.2f | %.2f |\n",
                  model_display_name(s.model).c_str(), on_off(s.augmentation).c_str(),
                  std::string(display_name(s.plane)).c_str(), std::string(to_string(s.phase)).c_str(),
                  100.0 * s.metrics.precision, 100.0 * s.metrics.recall, 100.0 * s.metrics.f1);
    out += line;
  }
  std::map<uint64_t, int> seeds;
  for (const auto& r : runs) seeds[r.seed]++;
  out += "\nMean valid F1 over " + std::to_string(seeds.size()) + " seed(s) and all planes:\n\n";
  for (const char* model : kModels) {
    bool have = false;
    for (const auto& r : runs) have = have || r.model == model;
    if (!have) continue;
    const double on = mean_valid_f1(model, true), off = mean_valid_f1(model, false);
    std::snprintf(line, sizeof line, "- %s: with augmentation %.2f, without %.2f, difference %+.2f points\n",
                  model_display_name(model).c_str(), 100.0 * on, 100.0 * off, 100.0 * (on - off));
    out += line;
  }
  out += "\nFull-scale expectation: augmentation raises every metric by 2 points or more. "
         "Desk-scale runs only check the direction (augmentation >= no augmentation in valid F1).\n";
  return out;
}

void AblationResult::write(const fs::path& dir) const {
  fs::create_directories(dir);
  auto put = [&](const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out << text;
  };
  put(dir / "ablation.csv", to_csv());
  put(dir / "ablation_runs.csv", runs_csv());
  put(dir / "ablation.md", to_markdown());
  const auto rows = summary();
  for (Phase phase : kScoredPhases) {
    std::vector<std::string> groups;
    for (Plane p : kAllPlanes) groups.emplace_back(to_string(p));
    std::vector<BarSeries> series;
    for (const char* model : kModels) {
      for (bool aug : {false, true}) {
        BarSeries s{std::string(model) + "_" + on_off(aug), {}};
        for (Plane p : kAllPlanes) {
          double v = 0;
          for (const auto& r : rows) {
            if (r.model == model && r.augmentation == aug && r.plane == p && r.phase == phase) v = r.metrics.f1;
          }
          s.values.push_back(v);
        }
        series.push_back(s);
      }
    }
    write_png(render_bar_chart(groups, series), dir / ("ablation_" + std::string(to_string(phase)) + "_f1.png"));
  }
}

AblationResult run_ablation(const AblationConfig& config, const std::vector<SliceSample>& dataset,
                            const std::function<void(const AblationRun&)>& on_run) {
  if (config.seeds.empty()) throw ConfigError("ablation needs at least one seed");
  SliceDataset data;
  for (const auto& s : dataset) {
    if (s.phase == Phase::Train) data.train.push_back(s);
    if (s.phase == Phase::Valid) data.valid.push_back(s);
  }
  if (data.train.empty()) throw TrainingError("ablation dataset has no train slices");

  AblationResult result;
  for (uint64_t seed : config.seeds) {
    for (const char* tag : kModels) {
      for (bool aug : {true, false}) {
        const auto arch = parse_architecture(tag);
        auto mc = config.scale == Scale::Desk ? ModelConfig::desk(arch) : ModelConfig::full(arch);
        mc.init_seed = seed;
        mc.rf_seed = seed;
        auto model = build_model(mc);
        auto tc = config.train;
        tc.seed = seed;
        tc.augment = aug;
        log::info("ablation: seed " + std::to_string(seed) + ", " + tag + ", augmentation " + on_off(aug));
        auto trained = train(model, data, tc);
        if (!trained.best_state.empty()) restore_state(*model, trained.best_state);

        AblationRun run{tag, aug, seed, trained.history, {}};
        auto eval = config.eval;
        eval.height = mc.input_height;
        eval.width = mc.input_width;
        for (Plane plane : kAllPlanes) {
          for (Phase phase : kScoredPhases) run.rows.push_back(evaluate(model, dataset, plane, phase, eval));
        }
        if (on_run) on_run(run);
        result.runs.push_back(std::move(run));
      }
    }
  }
  return result;
}

}  // namespace vertseg
