#include <torch/torch.h>

#include <chrono>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "vertseg/archive.hpp"
#include "vertseg/error.hpp"
#include "vertseg/log.hpp"
#include "vertseg/network.hpp"

using namespace vertseg;
namespace fs = std::filesystem;

namespace {

struct QuietWarnings {
  log::Sink previous = log::set_warning_sink([](std::string_view) {});
  ~QuietWarnings() { log::set_warning_sink(previous); }
};

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("vertseg_test_network_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void check_masks(const NetworkOutput& out, int64_t n, int64_t h, int64_t w) {
  CHECK(out.mask1.sizes() == torch::IntArrayRef({n, 1, h, w}));
  CHECK(out.mask2.sizes() == torch::IntArrayRef({n, 1, h, w}));
  CHECK(out.mask1.min().item<float>() > 0.0f);
  CHECK(out.mask1.max().item<float>() < 1.0f);
  CHECK(out.mask2.min().item<float>() > 0.0f);
  CHECK(out.mask2.max().item<float>() < 1.0f);
}

}  // namespace

TEST_CASE("desk-scale networks produce two masks at input resolution") {
  QuietWarnings quiet;
  for (auto arch : {Architecture::PlusPlus, Architecture::Baseline}) {
    auto model = build_model(ModelConfig::desk(arch));
    model->eval();
    torch::NoGradGuard no_grad;
    auto start = std::chrono::steady_clock::now();
    auto out = model->forward(torch::randn({1, 1, 64, 64}));
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    check_masks(out, 1, 64, 64);
    CHECK(seconds < 1.0);

    auto single = forward(model, torch::randn({1, 64, 64}));
    CHECK(single.mask2.sizes() == torch::IntArrayRef({1, 64, 64}));
  }
}

TEST_CASE("full-scale DoubleU-Net++ handles 256x256 input") {
  QuietWarnings quiet;
  auto model = build_doubleunet_pp(ModelConfig::full(Architecture::PlusPlus));
  model->eval();
  torch::NoGradGuard no_grad;
  check_masks(model->forward(torch::randn({1, 1, 256, 256})), 1, 256, 256);
}

TEST_CASE("zero image gives a zero Network-2 input") {
  QuietWarnings quiet;
  auto model = build_doubleunet_pp(ModelConfig::desk(Architecture::PlusPlus));
  model->eval();
  torch::NoGradGuard no_grad;
  auto out = model->forward(torch::zeros({2, 1, 32, 32}));
  CHECK(torch::all(out.network2_input == 0).item<bool>());
  CHECK(out.mask1.abs().sum().item<float>() > 0.0f);
}

TEST_CASE("spatial sizes must be multiples of 16") {
  auto model = build_doubleunet_pp(ModelConfig::desk(Architecture::PlusPlus));
  model->eval();
  try {
    model->forward(torch::randn({1, 1, 60, 60}));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("spatial size must be divisible by 16") != std::string::npos);
  }
  CHECK_THROWS_AS(model->forward(torch::randn({1, 3, 64, 64})), ShapeError);
}

TEST_CASE("eval-mode forward is deterministic") {
  QuietWarnings quiet;
  auto model = build_doubleunet_pp(ModelConfig::desk(Architecture::PlusPlus));
  model->eval();
  torch::NoGradGuard no_grad;
  auto x = torch::randn({1, 1, 64, 64});
  auto a = model->forward(x);
  auto b = model->forward(x);
  CHECK(torch::equal(a.mask1, b.mask1));
  CHECK(torch::equal(a.mask2, b.mask2));

  // Same config and seed rebuild the same parameters.
  auto again = build_doubleunet_pp(ModelConfig::desk(Architecture::PlusPlus));
  again->eval();
  CHECK(torch::equal(again->forward(x).mask2, a.mask2));
}

TEST_CASE("parameter counting") {
  torch::nn::Conv2d conv(torch::nn::Conv2dOptions(1, 8, 3).bias(true));
  CHECK(count_parameters(*conv) == 80);

  const auto pp_full = count_parameters(*build_doubleunet_pp(ModelConfig::full(Architecture::PlusPlus)));
  const auto base_full = count_parameters(*build_doubleunet_baseline(ModelConfig::full(Architecture::Baseline)));
  const auto pp_desk = count_parameters(*build_doubleunet_pp(ModelConfig::desk(Architecture::PlusPlus)));
  const auto base_desk = count_parameters(*build_doubleunet_baseline(ModelConfig::desk(Architecture::Baseline)));
  MESSAGE("parameters: ++ full " << pp_full << ", baseline full " << base_full << ", ++ desk " << pp_desk
                                  << ", baseline desk " << base_desk);
  CHECK(pp_full < base_full);
  CHECK(pp_desk < pp_full);
  CHECK(base_desk < base_full);
}

TEST_CASE("parameter count is monotone in every width field") {
  const auto base_cfg = ModelConfig::desk(Architecture::PlusPlus);
  const auto reference = count_parameters(*build_model(base_cfg));
  auto widen = [&](auto&& mutate) {
    auto cfg = base_cfg;
    mutate(cfg);
    return count_parameters(*build_model(cfg));
  };
  CHECK(widen([](ModelConfig& c) { c.dense.growth_rate += 4; }) > reference);
  CHECK(widen([](ModelConfig& c) { c.dense.init_features += 4; }) > reference);
  CHECK(widen([](ModelConfig& c) { c.encoder2_channels[1] += 4; }) > reference);
  CHECK(widen([](ModelConfig& c) { c.decoder_channels[2] += 4; }) > reference);
  CHECK(widen([](ModelConfig& c) { c.block.out_channels += 4; }) > reference);
  CHECK(widen([](ModelConfig& c) { c.block.rf_dim += 4; }) > reference);

  const auto vgg_cfg = ModelConfig::desk(Architecture::Baseline);
  const auto vgg_reference = count_parameters(*build_model(vgg_cfg));
  auto cfg = vgg_cfg;
  cfg.vgg.widths[3] += 8;
  CHECK(count_parameters(*build_model(cfg)) > vgg_reference);
}

TEST_CASE("baseline and ++ are drop-in comparable") {
  QuietWarnings quiet;
  auto pp = build_doubleunet_pp(ModelConfig::desk(Architecture::PlusPlus));
  auto base = build_doubleunet_baseline(ModelConfig::desk(Architecture::PlusPlus));
  CHECK(base->architecture() == Architecture::Baseline);
  pp->eval();
  base->eval();
  torch::NoGradGuard no_grad;
  auto x = torch::randn({2, 1, 32, 48});
  auto a = pp->forward(x);
  auto b = base->forward(x);
  CHECK(a.mask1.sizes() == b.mask1.sizes());
  CHECK(a.mask2.sizes() == b.mask2.sizes());
}

TEST_CASE("rf placement flag restricts random features to the last Network-2 stage") {
  auto cfg = ModelConfig::desk(Architecture::PlusPlus);
  auto all = build_model(cfg);
  for (const auto& stage : all->decoder1()) CHECK(stage->squeeze()->uses_random_features());
  for (const auto& stage : all->decoder2()) CHECK(stage->squeeze()->uses_random_features());

  cfg.rf_placement = RfPlacement::LastStageOnly;
  auto last = build_model(cfg);
  for (const auto& stage : last->decoder1()) CHECK_FALSE(stage->squeeze()->uses_random_features());
  CHECK_FALSE(last->decoder2()[0]->squeeze()->uses_random_features());
  CHECK(last->decoder2()[3]->squeeze()->uses_random_features());

  auto base = build_model(ModelConfig::desk(Architecture::Baseline));
  for (const auto& stage : base->decoder2()) CHECK_FALSE(stage->squeeze()->uses_random_features());
}

TEST_CASE("gradient reaches the first encoder-1 convolution") {
  QuietWarnings quiet;
  auto model = build_doubleunet_pp(ModelConfig::desk(Architecture::PlusPlus));
  model->train();
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(1e-3));
  auto x = torch::randn({2, 1, 64, 64});
  auto target = (x > 0.5).to(torch::kFloat32);
  opt.zero_grad();
  auto out = model->forward(x);
  auto loss = torch::binary_cross_entropy(out.mask2, target) + torch::binary_cross_entropy(out.mask1, target);
  loss.backward();
  auto grad = model->encoder1_first_conv()->weight.grad();
  REQUIRE(grad.defined());
  CHECK(grad.norm().item<float>() > 0.0f);
  opt.step();
}

TEST_CASE("weight archive round trip is bitwise") {
  QuietWarnings quiet;
  auto dir = temp_dir("roundtrip");
  auto cfg = ModelConfig::desk(Architecture::PlusPlus);
  cfg.init_seed = 5;
  auto model = build_model(cfg);
  // Move batch-norm statistics away from their defaults first.
  model->train();
  {
    torch::NoGradGuard no_grad;
    model->forward(torch::randn({2, 1, 32, 32}));
  }
  model->eval();
  save_weights(model, dir / "m.vsw");

  auto fresh_cfg = cfg;
  fresh_cfg.init_seed = 6;
  auto fresh = build_model(fresh_cfg);
  fresh->eval();
  CHECK_THROWS_AS(load_weights(fresh, dir / "m.vsw"), ConfigError);  // seeds are part of the manifest
  fresh = build_model(cfg);
  fresh->eval();
  load_weights(fresh, dir / "m.vsw");
  auto x = torch::randn({1, 1, 32, 32});
  torch::NoGradGuard no_grad;
  CHECK(torch::equal(model->forward(x).mask2, fresh->forward(x).mask2));

  auto rebuilt = load_model(dir / "m.vsw");
  rebuilt->eval();
  CHECK(torch::equal(model->forward(x).mask2, rebuilt->forward(x).mask2));

  auto manifest = read_archive_manifest(dir / "m.vsw");
  CHECK(manifest["architecture"] == "plusplus");
  CHECK(manifest["config"]["scale"] == "desk");
}

TEST_CASE("weight archive rejects mismatched configs and architectures") {
  auto dir = temp_dir("mismatch");
  auto model = build_model(ModelConfig::desk(Architecture::PlusPlus));
  save_weights(model, dir / "pp.vsw");

  auto wider_cfg = ModelConfig::desk(Architecture::PlusPlus);
  wider_cfg.encoder2_channels = {16, 32, 64, 128};
  auto wider = build_model(wider_cfg);
  try {
    load_weights(wider, dir / "pp.vsw");
    FAIL("expected a config mismatch");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("/encoder2_channels/0") != std::string::npos);
    CHECK(msg.find("/encoder2_channels/3") != std::string::npos);
  }

  auto baseline = build_model(ModelConfig::desk(Architecture::Baseline));
  try {
    load_weights(baseline, dir / "pp.vsw");
    FAIL("expected an architecture mismatch");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("architecture tag mismatch") != std::string::npos);
  }
}

TEST_CASE("corrupt and missing archives are reported") {
  auto dir = temp_dir("corrupt");
  auto model = build_model(ModelConfig::desk(Architecture::Baseline));
  save_weights(model, dir / "b.vsw");
  {
    std::fstream f(dir / "b.vsw", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-16, std::ios::end);
    const char junk[4] = {1, 2, 3, 4};
    f.write(junk, 4);
  }
  CHECK_THROWS_AS(load_weights(model, dir / "b.vsw"), FormatError);
  {
    std::ofstream f(dir / "junk.vsw", std::ios::binary);
    f << "not an archive";
  }
  CHECK_THROWS_AS(load_model(dir / "junk.vsw"), FormatError);
  CHECK_THROWS_AS(load_model(dir / "absent.vsw"), IoError);
}
