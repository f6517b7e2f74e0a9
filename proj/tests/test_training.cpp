#include <torch/torch.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "vertseg/error.hpp"
#include "vertseg/log.hpp"
#include "vertseg/training.hpp"

using namespace vertseg;
namespace fs = std::filesystem;

namespace {

struct QuietWarnings {
  log::Sink previous = log::set_warning_sink([](std::string_view) {});
  ~QuietWarnings() { log::set_warning_sink(previous); }
};

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("vertseg_test_training_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

DoubleUNet desk_model(Architecture arch = Architecture::PlusPlus, uint64_t init_seed = 0) {
  auto cfg = ModelConfig::desk(arch);
  cfg.init_seed = init_seed;
  return build_model(cfg);
}

SliceDataset small_dataset(size_t n_train, size_t n_valid) {
  auto slices = testing::phantom_slices(2, 11, Plane::Sagittal, 64);
  SliceDataset d;
  for (size_t i = 0; i < n_train; ++i) d.train.push_back(slices[i * 3]);
  for (size_t i = 0; i < n_valid; ++i) d.valid.push_back(slices[i * 3 + 1]);
  return d;
}

TrainConfig short_config(int64_t epochs, int64_t batch) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("learning-rate anchors") {
  TrainConfig cfg;
  CHECK(cfg.warmup_end() == 16);
  CHECK(lr_at(0, cfg) == 1e-5);
  CHECK(lr_at(16, cfg) == 4.8e-4);
  CHECK(lr_at(159, cfg) == 1.52e-4);
  CHECK(lr_at(8, cfg) == doctest::Approx(2.45e-4).epsilon(1e-12));

  double max_lr = 0;
  for (int64_t e = 0; e < cfg.epochs; ++e) {
    max_lr = std::max(max_lr, lr_at(e, cfg));
    if (e > 0 && e <= 16) CHECK(lr_at(e, cfg) >= lr_at(e - 1, cfg));
    if (e > 16) CHECK(lr_at(e, cfg) <= lr_at(e - 1, cfg));
    CHECK(lr_at(e, cfg) > 0);
  }
  CHECK(max_lr == 4.8e-4);
  // Continuity at the junction: neighbouring steps are small relative to the peak.
  CHECK(std::abs(lr_at(17, cfg) - lr_at(16, cfg)) < 0.02 * cfg.lr_peak);
  CHECK(std::abs(lr_at(16, cfg) - lr_at(15, cfg)) < 0.1 * cfg.lr_peak);

  auto small = short_config(11, 2);
  CHECK(small.warmup_end() == 2);
  CHECK(lr_at(6, small) == doctest::Approx(2.701110882581461e-4).epsilon(1e-12));  // geometric midpoint

  CHECK_THROWS_AS(lr_at(-1, cfg), ConfigError);
  CHECK_THROWS_AS(lr_at(160, cfg), ConfigError);
  CHECK_THROWS_AS(lr_at(0, short_config(2, 1)), ConfigError);
  auto bad = cfg;
  bad.lr_final = 1e-3;
  CHECK_THROWS_AS(lr_at(0, bad), ConfigError);
  bad = cfg;
  bad.warmup_fraction = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("bce + dice closed forms") {
  auto target = (torch::rand({2, 1, 8, 8}) > 0.5).to(torch::kFloat32);
  CHECK(bce_dice_loss(target, target).item<double>() < 1e-5);
  CHECK(bce_dice_loss(target, target).item<double>() >= 0.0);

  const int64_t n = 4096;
  auto half = torch::full({1, n}, 0.5, torch::kFloat64);
  auto ones = torch::ones({1, n}, torch::kFloat64);
  const double dice = 1.0 - (2 * 0.5 * n + 1.0) / (0.5 * n + n + 1.0);
  CHECK(bce_dice_loss(half, ones, {1, 0}).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce_dice_loss(half, ones, {0, 1}).item<double>() == doctest::Approx(dice).epsilon(1e-12));
  CHECK(dice == doctest::Approx(1.0 / 3.0).epsilon(1e-3));
  CHECK(bce_dice_loss(half, ones).item<double>() == doctest::Approx(std::log(2.0) + dice).epsilon(1e-12));

  // Batch reduction is the mean of per-sample losses.
  auto p = torch::rand({3, 1, 5, 5}, torch::kFloat64) * 0.98 + 0.01;
  auto g = (torch::rand({3, 1, 5, 5}) > 0.4).to(torch::kFloat64);
  double mean = 0;
  for (int i = 0; i < 3; ++i) mean += bce_dice_loss(p.slice(0, i, i + 1), g.slice(0, i, i + 1)).item<double>() / 3;
  CHECK(bce_dice_loss(p, g).item<double>() == doctest::Approx(mean).epsilon(1e-12));

  // Pixel permutations applied to both leave the loss unchanged.
  auto perm = torch::randperm(25);
  auto pp = p.flatten(1).index_select(1, perm).view({3, 1, 5, 5});
  auto gp = g.flatten(1).index_select(1, perm).view({3, 1, 5, 5});
  CHECK(bce_dice_loss(pp, gp).item<double>() == doctest::Approx(bce_dice_loss(p, g).item<double>()).epsilon(1e-12));

  CHECK_THROWS_AS(bce_dice_loss(p, g.slice(0, 0, 2)), ShapeError);
  CHECK_THROWS_AS(bce_dice_loss(p, g * 0.5), ShapeError);
}

TEST_CASE("bce + dice gradient against finite differences") {
  torch::manual_seed(5);
  for (int trial = 0; trial < 4; ++trial) {
    auto target = (torch::rand({2, 1, 8, 8}) > 0.5).to(torch::kFloat64);
    auto pred = torch::rand({2, 1, 8, 8}, torch::kFloat64) * 0.9 + 0.05;
    auto res = testing::check_input_gradient(
        [&](const torch::Tensor& x) { return bce_dice_loss(x, target); }, pred, 1e-4, 1e-3);
    CHECK(res.pass_fraction() == 1.0);
  }
}

TEST_CASE("a zero learning-rate step leaves parameters unchanged") {
  auto model = desk_model();
  auto before = snapshot_state(*model);
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(0.0));
  auto x = torch::rand({2, 1, 64, 64}) * 2 - 1;
  auto y = (torch::rand({2, 1, 64, 64}) > 0.5).to(torch::kFloat32);
  auto out = model->forward(x);
  (bce_dice_loss(out.mask2, y) + bce_dice_loss(out.mask1, y)).backward();
  opt.step();
  size_t i = 0;
  for (const auto& p : model->named_parameters()) {
    while (before[i].first != p.key()) ++i;
    CHECK(torch::equal(p.value(), before[i].second));
  }
}

TEST_CASE("history, determinism and model selection") {
  QuietWarnings quiet;
  auto data = small_dataset(3, 2);
  auto cfg = short_config(3, 2);
  auto m1 = desk_model();
  auto r1 = train(m1, data, cfg);
  auto m2 = desk_model();
  auto r2 = train(m2, data, cfg);
  REQUIRE(r1.history.records.size() == 3);
  for (size_t e = 0; e < 3; ++e) {
    const auto& a = r1.history.records[e];
    CHECK(a.epoch == static_cast<int64_t>(e));
    CHECK(a.lr == lr_at(static_cast<int64_t>(e), cfg));
    CHECK(a.train_loss == r2.history.records[e].train_loss);
    CHECK(a.valid_loss == r2.history.records[e].valid_loss);
    CHECK(a.valid_f1 == r2.history.records[e].valid_f1);
  }
  CHECK(r1.best_epoch >= 0);
  CHECK_FALSE(r1.best_state.empty());
  CHECK(r1.best_valid_f1 == r1.history.records[r1.best_epoch].valid_f1);

  const auto csv = r1.history.to_csv();
  CHECK(csv.rfind("epoch,lr,train_loss,train_f1,valid_loss,valid_f1,wall_time\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

  auto changed = cfg;
  changed.seed = 4;
  auto m3 = desk_model();
  CHECK(train(m3, data, changed).history.records[0].train_loss != r1.history.records[0].train_loss);
}

TEST_CASE("checkpoint and resume") {
  QuietWarnings quiet;
  auto data = small_dataset(2, 1);
  auto cfg = short_config(6, 2);
  auto full_model = desk_model();
  auto full = train(full_model, data, cfg);

  auto dir = temp_dir("resume");
  TrainOptions first;
  first.checkpoint_dir = dir;
  first.stop_after = 3;
  auto m = desk_model();
  auto part = train(m, data, cfg, first);
  CHECK(part.history.records.size() == 3);
  CHECK(fs::exists(dir / "model.vsw"));
  CHECK(fs::exists(dir / "optimizer.pt"));
  CHECK(fs::exists(dir / "state.json"));

  TrainOptions cont;
  cont.checkpoint_dir = dir;
  cont.resume = true;
  auto resumed_model = desk_model();
  auto resumed = train(resumed_model, data, cfg, cont);
  REQUIRE(resumed.history.records.size() == 6);
  for (size_t e = 0; e < 6; ++e) {
    CHECK(resumed.history.records[e].lr == full.history.records[e].lr);
    CHECK(resumed.history.records[e].train_loss == full.history.records[e].train_loss);
    CHECK(resumed.history.records[e].valid_f1 == full.history.records[e].valid_f1);
  }

  auto again_model = desk_model();
  auto again = train(again_model, data, cfg, cont);
  CHECK(again.history.records.size() == 6);
  CHECK(again.next_epoch == 6);

  auto other = cfg;
  other.batch_size = 1;
  auto m4 = desk_model();
  CHECK_THROWS_WITH_AS(train(m4, data, other, cont), doctest::Contains("batch_size"), ConfigError);

  TrainOptions missing;
  missing.checkpoint_dir = temp_dir("missing");
  missing.resume = true;
  auto m5 = desk_model();
  CHECK_THROWS_AS(train(m5, data, cfg, missing), IoError);

  std::ofstream(dir / "state.json") << "{ truncated";
  auto m6 = desk_model();
  CHECK_THROWS_AS(train(m6, data, cfg, cont), FormatError);
}

TEST_CASE("training failures are reported") {
  QuietWarnings quiet;
  auto cfg = short_config(3, 2);
  auto model = desk_model();
  CHECK_THROWS_AS(train(model, SliceDataset{}, cfg), TrainingError);

  auto data = small_dataset(2, 0);
  {
    torch::NoGradGuard no_grad;
    model->encoder1_first_conv()->weight.fill_(std::numeric_limits<float>::quiet_NaN());
  }
  CHECK_THROWS_WITH_AS(train(model, data, cfg), doctest::Contains("epoch 0, step 0"), TrainingError);
}

TEST_CASE("overfit oracle on four phantom slices") {
  QuietWarnings quiet;
  auto slices = testing::phantom_slices(2, 21, Plane::Sagittal, 64);
  SliceDataset data;
  for (size_t i = 0; i < 4; ++i) data.train.push_back(slices[i * slices.size() / 8]);
  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.batch_size = 4;
  cfg.augment = false;
  cfg.seed = 1;
  auto model = desk_model();
  std::vector<double> losses;
  TrainOptions opts;
  opts.on_epoch = [&](const EpochRecord& r) { losses.push_back(r.train_loss); };
  const auto t0 = std::chrono::steady_clock::now();
  auto result = train(model, data, cfg, opts);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("overfit run: " << seconds << " s, final train F1 " << result.history.records.back().train_f1);
  CHECK(result.history.records.back().train_f1 >= 0.95);
  CHECK(seconds < 600);
  const double first = std::accumulate(losses.begin(), losses.begin() + 10, 0.0) / 10;
  const double later = std::accumulate(losses.begin() + 40, losses.begin() + 50, 0.0) / 10;
  CHECK(later < first);
}
