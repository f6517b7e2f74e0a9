#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "vertseg/ablation.hpp"
#include "vertseg/error.hpp"
#include "vertseg/evaluation.hpp"
#include "vertseg/image_io.hpp"
#include "vertseg/log.hpp"
#include "vertseg/metrics.hpp"
#include "vertseg/rng.hpp"

using namespace vertseg;
namespace fs = std::filesystem;

namespace {

struct QuietWarnings {
  log::Sink previous = log::set_warning_sink([](std::string_view) {});
  ~QuietWarnings() { log::set_warning_sink(previous); }
};

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("vertseg_test_evaluation_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

torch::Tensor t2(std::initializer_list<float> v, int64_t h, int64_t w) {
  return torch::tensor(std::vector<float>(v)).reshape({h, w});
}

// Image intensities chosen so that eval-mode normalization maps foreground to
// 0.5 and background to 0.
std::vector<SliceSample> stub_samples(int n, uint64_t seed, Phase phase = Phase::Valid) {
  Rng rng(seed);
  std::vector<SliceSample> out;
  for (int i = 0; i < n; ++i) {
    auto mask = torch::zeros({16, 16});
    auto acc = mask.accessor<float, 2>();
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) acc[y][x] = bernoulli(rng, 0.3) ? 1.0f : 0.0f;
    }
    SliceSample s;
    s.mask = mask;
    s.image = mask * 1024.0f;
    s.plane = Plane::Sagittal;
    s.volume_id = "stub";
    s.slice_index = i;
    s.phase = phase;
    out.push_back(s);
  }
  return out;
}

const Predictor kOracle = [](const torch::Tensor& x) { return (x > 0.25).to(torch::kFloat32); };
const Predictor kHalf = [](const torch::Tensor& x) { return torch::full_like(x, 0.5); };

}  // namespace

TEST_CASE("confusion counts on hand examples") {
  const auto ones = torch::ones({4, 4});
  CHECK(confusion_counts(ones, ones) == ConfusionCounts{16, 0, 0, 0});

  const auto c = confusion_counts(t2({1, 1, 0, 0}, 2, 2), t2({1, 0, 1, 0}, 2, 2));
  CHECK(c == ConfusionCounts{1, 1, 1, 1});
  const auto m = metrics_from_counts(c);
  CHECK(m.precision == 0.5);
  CHECK(m.recall == 0.5);
  CHECK(m.f1 == 0.5);
  CHECK(m.flags == 0u);

  const auto gt = t2({1, 0, 0, 1, 1, 0}, 2, 3);
  const auto comp = confusion_counts(1 - gt, gt);
  CHECK(comp.tp == 0);
  CHECK(comp.tn == 0);

  const auto perfect = metrics_from_counts(confusion_counts(gt, gt));
  CHECK(perfect.precision == 1.0);
  CHECK(perfect.recall == 1.0);
  CHECK(perfect.f1 == 1.0);

  // Threshold ties count as foreground.
  CHECK(confusion_counts(torch::full({2, 2}, 0.5), torch::ones({2, 2})).tp == 4);
}

TEST_CASE("zero denominators give 0 with a flag") {
  const auto empty_pred = metrics_from_counts({0, 0, 10, 5});
  CHECK(empty_pred.precision == 0.0);
  CHECK(empty_pred.recall == 0.0);
  CHECK(empty_pred.f1 == 0.0);
  CHECK((empty_pred.flags & kPrecisionUndefined));
  CHECK_FALSE((empty_pred.flags & kRecallUndefined));
  CHECK(empty_pred.flag_string() == "precision_undefined");

  const auto all_bg = metrics_from_counts({0, 0, 16, 0});
  CHECK(all_bg.flags == (kPrecisionUndefined | kRecallUndefined | kF1Undefined));
  CHECK(all_bg.flag_string() == "precision_undefined;recall_undefined;f1_undefined");
}

TEST_CASE("vectorized counts equal brute-force enumeration on 1000 random pairs") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    auto pred = torch::empty({16, 16});
    auto gt = torch::empty({16, 16});
    auto pa = pred.accessor<float, 2>();
    auto ga = gt.accessor<float, 2>();
    const double fg = uniform(rng, 0.0, 1.0);
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        pa[y][x] = static_cast<float>(uniform(rng, 0.0, 1.0));
        ga[y][x] = bernoulli(rng, fg) ? 1.0f : 0.0f;
      }
    }
    int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        const bool p = pa[y][x] >= 0.5f, g = ga[y][x] == 1.0f;
        tp += p && g;
        fp += p && !g;
        tn += !p && !g;
        fn += !p && g;
      }
    }
    const auto c = confusion_counts(pred, gt);
    REQUIRE(c == ConfusionCounts{tp, fp, tn, fn});
    const auto m = metrics_from_counts(c);
    const double P = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
    const double R = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
    const double F = 2 * tp + fp + fn > 0 ? 2.0 * tp / double(2 * tp + fp + fn) : 0.0;
    REQUIRE(std::abs(m.precision - P) <= 1e-12);
    REQUIRE(std::abs(m.recall - R) <= 1e-12);
    REQUIRE(std::abs(m.f1 - F) <= 1e-12);
    if (P + R > 0) REQUIRE(std::abs(m.f1 - 2 * P * R / (P + R)) <= 1e-9);
  }
}

TEST_CASE("raising the threshold never increases tp nor decreases fn") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    torch::manual_seed(static_cast<uint64_t>(trial));
    const auto pred = torch::rand({16, 16});
    const auto gt = (torch::rand({16, 16}) < uniform(rng, 0.1, 0.9)).to(torch::kFloat32);
    auto prev = confusion_counts(pred, gt, 0.01);
    for (double t = 0.05; t < 1.0; t += 0.05) {
      const auto c = confusion_counts(pred, gt, t);
      REQUIRE(c.tp <= prev.tp);
      REQUIRE(c.fn >= prev.fn);
      REQUIRE(c.total() == 256);
      prev = c;
    }
  }
}

TEST_CASE("confusion counts reject bad input") {
  CHECK_THROWS_AS(confusion_counts(torch::ones({4, 4}), torch::ones({4, 5})), ShapeError);
  CHECK_THROWS_AS(confusion_counts(torch::ones({4, 4}), torch::full({4, 4}, 0.5)), ShapeError);
  CHECK_THROWS_AS(confusion_counts(torch::ones({4, 4}), torch::ones({4, 4}), 0.0), ConfigError);
  CHECK_THROWS_AS(confusion_counts(torch::ones({4, 4}), torch::ones({4, 4}), 1.0), ConfigError);
}

TEST_CASE("evaluate with oracle and constant stubs") {
  const auto samples = stub_samples(6, 1);
  const auto perfect = evaluate(kOracle, samples, Plane::Sagittal, Phase::Valid, "plusplus");
  CHECK(perfect.metrics.precision == 1.0);
  CHECK(perfect.metrics.recall == 1.0);
  CHECK(perfect.metrics.f1 == 1.0);

  const auto half = evaluate(kHalf, samples, Plane::Sagittal, Phase::Valid, "baseline");
  double fg = 0;
  for (const auto& s : samples) fg += s.mask.sum().item<double>();
  const double fraction = fg / (6.0 * 256.0);
  CHECK(half.metrics.recall == 1.0);
  CHECK(half.metrics.precision == doctest::Approx(fraction).epsilon(1e-12));
  CHECK(half.counts.tn == 0);
  CHECK(half.counts.fn == 0);
}

TEST_CASE("micro pooling equals the sum of per-slice counts; macro averages slices") {
  const auto samples = stub_samples(5, 2);
  const Predictor noisy = [](const torch::Tensor& x) {
    torch::manual_seed(9);
    return (x + 0.4 * torch::rand_like(x)).clamp(0, 1);
  };
  EvaluateOptions micro;
  micro.batch_size = 5;
  const auto row = evaluate(noisy, samples, Plane::Sagittal, Phase::Valid, "plusplus", micro);

  std::vector<SliceSample> all = samples;
  torch::Tensor x = torch::stack({all[0].image, all[1].image, all[2].image, all[3].image, all[4].image}) / 2048.0;
  const auto probs = noisy(x.unsqueeze(1).clamp(-1, 1));
  ConfusionCounts sum;
  double f1_sum = 0;
  for (int i = 0; i < 5; ++i) {
    const auto c = confusion_counts(probs[i][0], samples[i].mask);
    sum += c;
    f1_sum += metrics_from_counts(c).f1;
  }
  CHECK(row.counts == sum);
  CHECK(row.metrics.f1 == doctest::Approx(metrics_from_counts(sum).f1).epsilon(1e-12));

  EvaluateOptions macro = micro;
  macro.averaging = Averaging::Macro;
  const auto mrow = evaluate(noisy, samples, Plane::Sagittal, Phase::Valid, "plusplus", macro);
  CHECK(mrow.counts == sum);
  CHECK(mrow.metrics.f1 == doctest::Approx(f1_sum / 5).epsilon(1e-12));

  CHECK_THROWS_AS(evaluate(kOracle, samples, Plane::Axial, Phase::Valid, "plusplus"), Error);
  CHECK_THROWS_AS(evaluate(kOracle, samples, Plane::Sagittal, Phase::Test, "plusplus"), Error);
}

TEST_CASE("report CSV is deterministic and the table mirrors the published layout") {
  auto make = [] {
    MetricsReport r;
    auto samples = stub_samples(4, 3);
    auto test = stub_samples(4, 4, Phase::Test);
    samples.insert(samples.end(), test.begin(), test.end());
    for (const char* model : {"plusplus", "baseline"}) {
      const auto& p = std::string(model) == "plusplus" ? kOracle : kHalf;
      for (Phase phase : {Phase::Valid, Phase::Test}) {
        r.rows.push_back(evaluate(p, samples, Plane::Sagittal, phase, model));
      }
    }
    return r;
  };
  const auto a = make(), b = make();
  CHECK(a.to_csv() == b.to_csv());
  const auto csv = a.to_csv();
  CHECK(csv.substr(0, csv.find('\n')) == "model,plane,phase,precision,recall,f1,tp,fp,tn,fn,flags");
  CHECK(csv.find("plusplus,sagittal,valid,100.0000,100.0000,100.0000,") != std::string::npos);

  const auto md = a.to_markdown();
  CHECK(md.substr(0, md.find('\n')) == "| Plane | Model | Phase | Precision | Recall | F1 |");
  CHECK(md.find("| Sagittal | DoubleU-Net++ | Valid | 100.00 | 100.00 | 100.00 |") != std::string::npos);
  CHECK(md.find("| Sagittal | DoubleU-Net | Test |") != std::string::npos);

  const auto back = MetricsReport::from_csv(csv);
  REQUIRE(back.rows.size() == a.rows.size());
  CHECK(back.to_csv() == csv);
  for (size_t i = 0; i < a.rows.size(); ++i) {
    const auto& m = a.rows[i].metrics;
    if (m.precision + m.recall > 0) {
      CHECK(std::abs(m.f1 - 2 * m.precision * m.recall / (m.precision + m.recall)) <= 1e-9);
    }
    CHECK(back.rows[i].counts == a.rows[i].counts);
    CHECK(std::abs(back.rows[i].metrics.f1 - m.f1) <= 5e-7);
  }

  const auto dir = temp_dir("report");
  a.write(dir, "metrics_x");
  CHECK(fs::exists(dir / "metrics_x.csv"));
  CHECK(fs::exists(dir / "metrics_x.md"));
  CHECK(fs::exists(dir / "metrics_x.provenance.json"));
  CHECK(slurp(dir / "metrics_x.csv") == csv);
}

TEST_CASE("qualitative grid has one five-tile row per sample") {
  QuietWarnings quiet;
  auto samples = testing::phantom_slices(1, 3, Plane::Sagittal, 64, Phase::Test);
  samples.resize(3);
  auto base_cfg = ModelConfig::desk(Architecture::Baseline);
  auto pp_cfg = ModelConfig::desk(Architecture::PlusPlus);
  auto baseline = build_model(base_cfg);
  auto plusplus = build_model(pp_cfg);

  const auto dir = temp_dir("qualitative");
  export_qualitative(baseline, plusplus, samples, dir / "a.png");
  export_qualitative(baseline, plusplus, samples, dir / "b.png");
  CHECK(slurp(dir / "a.png") == slurp(dir / "b.png"));

  const auto grid = read_png(dir / "a.png");
  CHECK(grid.width == 5 * 64);
  CHECK(grid.height == 3 * 64);
  CHECK(grid.channels == 1);
  bool binary = true, gt_equal = true;
  for (int r = 0; r < 3; ++r) {
    auto acc = samples[r].mask.accessor<float, 2>();
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 5 * 64; ++x) {
        const uint8_t v = *grid.at(x, r * 64 + y);
        binary = binary && (v == 0 || v == 255);
        if (x >= 4 * 64) gt_equal = gt_equal && v == static_cast<uint8_t>(acc[y][x - 4 * 64] * 255);
      }
    }
  }
  CHECK(binary);
  CHECK(gt_equal);
}

TEST_CASE("ablation grid yields 24 summary rows") {
  QuietWarnings quiet;
  std::vector<SliceSample> dataset;
  for (Plane plane : kAllPlanes) {
    auto train = testing::phantom_slices(1, 21, plane, 64, Phase::Train);
    train.resize(1);
    auto valid = testing::phantom_slices(1, 22, plane, 64, Phase::Valid);
    valid.resize(1);
    auto test = testing::phantom_slices(1, 23, plane, 64, Phase::Test);
    test.resize(1);
    for (auto* part : {&train, &valid, &test}) dataset.insert(dataset.end(), part->begin(), part->end());
  }
  AblationConfig cfg;
  cfg.seeds = {0};
  cfg.train.epochs = 3;
  cfg.train.batch_size = 3;
  int launched = 0;
  const auto result = run_ablation(cfg, dataset, [&](const AblationRun&) { ++launched; });
  CHECK(launched == 4);
  REQUIRE(result.runs.size() == 4);
  CHECK(result.summary().size() == 24);

  const auto csv = result.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 25);
  CHECK(csv.substr(0, csv.find('\n')) == "model,augmentation,plane,phase,precision,recall,f1,tp,fp,tn,fn,flags");
  const auto runs = result.runs_csv();
  CHECK(std::count(runs.begin(), runs.end(), '\n') == 25);
  CHECK(result.to_markdown().find("difference") != std::string::npos);

  const auto dir = temp_dir("ablation");
  result.write(dir);
  for (const char* f : {"ablation.csv", "ablation_runs.csv", "ablation.md", "ablation_valid_f1.png",
                        "ablation_test_f1.png"}) {
    CHECK(fs::exists(dir / f));
  }
}
