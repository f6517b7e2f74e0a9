#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "vertseg/cli.hpp"
#include "vertseg/config.hpp"
#include "vertseg/error.hpp"
#include "vertseg/log.hpp"

using namespace vertseg;
namespace fs = std::filesystem;

namespace {

struct QuietWarnings {
  log::Sink previous = log::set_warning_sink([](std::string_view) {});
  ~QuietWarnings() { log::set_warning_sink(previous); }
};

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "vertseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("vertseg_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

size_t count_lines(const std::string& s) { return static_cast<size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("flat config parsing and scale defaults") {
  const auto flat = FlatConfig::parse("# comment\nseed = 5  # trailing\n\ntrain.epochs=7\naug.p.rotation = 0.25\n");
  CHECK(flat.get("seed") == "5");
  CHECK(flat.get("train.epochs") == "7");
  const auto s = settings_from_config(flat);
  CHECK(s.seed == 5);
  CHECK(s.train.seed == 5);
  CHECK(s.train.epochs == 7);
  CHECK(s.train.aug.probability(AugOp::Rotation) == 0.25);
  CHECK(s.train.aug.probability(AugOp::Shear) == s.train.aug.p_op);
  CHECK(s.scale == Scale::Desk);
  CHECK(s.slices.size == 64);
  CHECK(s.model_config(Architecture::PlusPlus).init_seed == 5);

  FlatConfig full;
  full.set("scale=full");
  const auto f = settings_from_config(full);
  CHECK(f.slices.size == 256);
  CHECK(f.train.epochs == 160);
  CHECK(f.train.batch_size == 8);
  CHECK(f.model_config(Architecture::Baseline).input_height == 256);

  FlatConfig over;
  over.set("model.rf_dim=32");
  over.set("plane=axial");
  const auto o = settings_from_config(over);
  CHECK(o.model_config(Architecture::PlusPlus).block.rf_dim == 32);
  REQUIRE(o.planes.size() == 1);
  CHECK(o.planes[0] == Plane::Axial);

  CHECK_THROWS_AS(settings_from_config(FlatConfig::parse("no_such_key = 1")), ConfigError);
  CHECK_THROWS_AS(settings_from_config(FlatConfig::parse("train.epochs = many")), ConfigError);
  CHECK_THROWS_AS(settings_from_config(FlatConfig::parse("aug.p.twirl = 0.1")), ConfigError);
  CHECK_THROWS_AS(FlatConfig::parse("just words"), ConfigError);
  CHECK(parse_seed_list("0, 1,2") == std::vector<uint64_t>{0, 1, 2});
  CHECK_THROWS_AS(parse_seed_list(""), ConfigError);
}

TEST_CASE("usage errors exit 2 with usage text") {
  auto r = cli({"train", "--bogus"});
  CHECK(r.code == 2);
  CHECK(r.err.find("--bogus") != std::string::npos);
  CHECK(r.err.find("Usage") != std::string::npos);

  r = cli({});
  CHECK(r.code == 2);
  CHECK(r.err.find("Usage") != std::string::npos);

  r = cli({"evaluate", "--scale", "huge"});
  CHECK(r.code == 2);

  r = cli({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("preprocess") != std::string::npos);

  r = cli({"--help-config"});
  CHECK(r.code == 0);
  CHECK(r.out.find("train.epochs") != std::string::npos);
}

TEST_CASE("runtime failures exit 1 with a one-line diagnostic") {
  const auto dir = temp_dir("failures");
  auto r = cli({"evaluate", "--workdir", dir.string()});
  CHECK(r.code == 1);
  CHECK(count_lines(r.err) == 1);
  CHECK(r.err.find("best.vsw") != std::string::npos);
  CHECK(r.err.find("model") != std::string::npos);

  r = cli({"evaluate", "--model", (dir / "missing.vsw").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("missing.vsw") != std::string::npos);

  r = cli({"train", "--workdir", dir.string(), "--set", "no.such=1"});
  CHECK(r.code == 1);
  CHECK(r.err.find("no.such") != std::string::npos);

  r = cli({"preprocess", "--in", (dir / "nothing").string()});
  CHECK(r.code == 1);
  CHECK(count_lines(r.err) == 1);
}

TEST_CASE("synth, preprocess, train and evaluate pipeline") {
  QuietWarnings quiet;
  const auto dir = temp_dir("pipeline");
  const auto w = dir.string();

  auto r = cli({"synth", "--n", "4", "--seed", "7", "--out", (dir / "d").string()});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "d" / "images" / "phantom_000.nii.gz"));
  CHECK(fs::exists(dir / "d" / "masks" / "phantom_003.nii.gz"));

  r = cli({"preprocess", "--in", (dir / "d").string(), "--plane", "sagittal", "--workdir", w, "--set",
           "slices.stride=3"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "cache" / "index.json"));
  CHECK(fs::exists(dir / "cache" / "split.json"));

  r = cli({"train", "--scale", "desk", "--workdir", w, "--plane", "sagittal", "--set", "train.epochs=3"});
  REQUIRE(r.code == 0);
  const auto run = dir / "runs" / "plusplus";
  CHECK(fs::exists(run / "history.csv"));
  CHECK(fs::exists(run / "best.vsw"));
  CHECK(fs::exists(run / "model.vsw"));
  CHECK(fs::exists(run / "history.png"));
  std::ifstream hist(run / "history.csv");
  std::string header;
  std::getline(hist, header);
  CHECK(header == "epoch,lr,train_loss,train_f1,valid_loss,valid_f1,wall_time");

  r = cli({"evaluate", "--workdir", w, "--plane", "sagittal"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "reports" / "metrics_plusplus.csv"));

  std::ifstream csv_in(dir / "reports" / "metrics_plusplus.csv");
  std::stringstream first;
  first << csv_in.rdbuf();
  r = cli({"evaluate", "--workdir", w, "--plane", "sagittal"});
  REQUIRE(r.code == 0);
  std::ifstream csv_again(dir / "reports" / "metrics_plusplus.csv");
  std::stringstream second;
  second << csv_again.rdbuf();
  CHECK(first.str() == second.str());

  r = cli({"report", "--workdir", w});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("| Plane | Model | Phase | Precision | Recall | F1 |") != std::string::npos);
  CHECK(fs::exists(dir / "reports" / "report.md"));

  r = cli({"predict", "--workdir", w, "--plane", "sagittal", "--input",
           (dir / "d" / "images" / "phantom_001.nii.gz").string(), "--out", (dir / "pred.nii.gz").string()});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "pred.nii.gz"));

  r = cli({"train", "--scale", "desk", "--workdir", w, "--plane", "sagittal", "--set", "train.epochs=4",
           "--resume"});
  CHECK(r.code == 1);
  CHECK(r.err.find("epochs") != std::string::npos);
}
