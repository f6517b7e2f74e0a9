#include "vertseg/cli.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "CLI11.hpp"
#include "vertseg/ablation.hpp"
#include "vertseg/archive.hpp"
#include "vertseg/config.hpp"
#include "vertseg/error.hpp"
#include "vertseg/evaluation.hpp"
#include "vertseg/image_io.hpp"
#include "vertseg/log.hpp"
#include "vertseg/phantom.hpp"
#include "vertseg/rng.hpp"

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

namespace vertseg {

namespace {

struct CommonOptions {
  std::string config_file;
  std::optional<uint64_t> seed;
  std::string plane;
  std::string scale;
  std::vector<std::string> sets;
  std::string workdir = ".";
  bool verbose = false;
};

void add_common(CLI::App* sub, CommonOptions& c) {
  sub->add_option("--config", c.config_file, "settings file (key = value lines)")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "master seed");
  sub->add_option("--plane", c.plane, "sagittal, coronal, axial or all");
  sub->add_option("--scale", c.scale, "desk or full")->check(CLI::IsMember({"desk", "full"}));
  sub->add_option("--set", c.sets, "override one setting, key=value (repeatable)");
  sub->add_option("--workdir", c.workdir, "root for default data, cache, run and report paths");
  sub->add_flag("-v,--verbose", c.verbose, "progress messages on stderr");
}

RunSettings resolve_settings(const CommonOptions& c, FlatConfig* flat_out = nullptr) {
  FlatConfig flat = c.config_file.empty() ? FlatConfig{} : FlatConfig::load(c.config_file);
  for (const auto& s : c.sets) flat.set(s);
  if (!c.scale.empty()) flat.set("scale", c.scale);
  if (c.seed) flat.set("seed", std::to_string(*c.seed));
  if (!c.plane.empty()) flat.set("plane", c.plane);
  if (flat_out) *flat_out = flat;
  return settings_from_config(flat);
}

fs::path or_default(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback : fs::path(given);
}

std::optional<Plane> plane_filter(const RunSettings& s) {
  if (s.planes.size() == 1) return s.planes.front();
  return std::nullopt;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return "";
  std::stringstream buf;
  buf << in.rdbuf();
  return hex64(hash_string(buf.str()));
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw IoError("missing " + what + ": " + p.string());
}

std::string volume_id_of(const fs::path& p) {
  std::string name = p.filename().string();
  for (const std::string ext : {".nii.gz", ".nii", ".vraw"}) {
    if (name.size() > ext.size() && name.compare(name.size() - ext.size(), ext.size(), ext) == 0) {
      return name.substr(0, name.size() - ext.size());
    }
  }
  return "";
}

// synth ----------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::optional<int> n;
};

int cmd_synth(const CommonOptions& c, const SynthArgs& a, std::ostream& out) {
  const auto s = resolve_settings(c);
  const fs::path dir = or_default(a.out, fs::path(c.workdir) / "data");
  const int n = a.n.value_or(s.synth_volumes);
  if (n < 1) throw ConfigError("--n must be >= 1");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (const auto& ph : make_synthetic_dataset(n, s.seed)) {
    save_volume(ph.image, dir / "images" / (ph.id + ".nii.gz"), VoxelType::Int16);
    save_volume(ph.mask, dir / "masks" / (ph.id + ".nii.gz"), VoxelType::UInt8);
    log::info("wrote " + ph.id);
  }
  out << "synth: " << n << " volumes in " << dir.string() << "\n";
  return 0;
}

// preprocess -----------------------------------------------------------------

struct PreprocessArgs {
  std::string in;
  std::string out;
};

int cmd_preprocess(const CommonOptions& c, const PreprocessArgs& a, std::ostream& out) {
  const auto s = resolve_settings(c);
  const fs::path in = or_default(a.in, fs::path(c.workdir) / "data");
  const fs::path cache = or_default(a.out, fs::path(c.workdir) / "cache");
  require_file(in / "images", "image directory");

  std::map<std::string, fs::path> images;
  for (const auto& e : fs::directory_iterator(in / "images")) {
    const auto id = volume_id_of(e.path());
    if (!id.empty()) images[id] = e.path();
  }
  if (images.empty()) throw IoError("no volumes in " + (in / "images").string());
  std::vector<std::string> ids;
  for (const auto& [id, path] : images) ids.push_back(id);
  const auto split = split_dataset(ids, s.split.fractions, s.seed);

  std::vector<SliceSample> samples;
  for (Phase phase : kAllPhases) {
    for (const auto& id : split.of(phase)) {
      const auto& image_path = images.at(id);
      const auto mask_path = in / "masks" / image_path.filename();
      require_file(mask_path, "mask for " + id);
      const auto image = resample_to_unit_spacing(load_volume(image_path), Interpolation::Linear);
      const auto mask = resample_to_unit_spacing(load_volume(mask_path), Interpolation::Nearest);
      for (Plane plane : s.planes) {
        auto slices = extract_slices(image, mask, plane, s.slices, id, phase);
        for (size_t k = 0; k < slices.size(); k += static_cast<size_t>(s.slice_stride)) {
          samples.push_back(std::move(slices[k]));
        }
      }
      log::info("sliced " + id + " (" + std::string(to_string(phase)) + ")");
    }
  }
  write_slice_cache(cache, samples);

  nlohmann::json sj;
  sj["seed"] = s.seed;
  sj["fractions"] = s.split.fractions;
  for (Phase phase : kAllPhases) sj[std::string(to_string(phase))] = split.of(phase);
  std::ofstream(cache / "split.json") << sj.dump(2) << "\n";

  out << "preprocess: " << samples.size() << " slices (" << split.train.size() << "/" << split.valid.size() << "/"
      << split.test.size() << " volumes train/valid/test) in " << cache.string() << "\n";
  return 0;
}

// train ----------------------------------------------------------------------

struct TrainArgs {
  std::string cache;
  std::string out;
  std::string arch;
  bool resume = false;
};

int cmd_train(const CommonOptions& c, const TrainArgs& a, std::ostream& out) {
  auto s = resolve_settings(c);
  if (!a.arch.empty()) s.architecture = parse_architecture(a.arch);
  const auto tag = std::string(to_string(s.architecture));
  const fs::path cache = or_default(a.cache, fs::path(c.workdir) / "cache");
  const fs::path dir = or_default(a.out, fs::path(c.workdir) / "runs" / tag);
  require_file(cache / "index.json", "slice cache index");

  SliceDataset data;
  data.train = read_slice_cache(cache, plane_filter(s), Phase::Train);
  data.valid = read_slice_cache(cache, plane_filter(s), Phase::Valid);
  if (data.train.empty()) throw TrainingError("no train slices in " + cache.string());

  const auto mc = s.model_config(s.architecture);
  auto model = build_model(mc);
  fs::create_directories(dir);
  TrainOptions opts;
  opts.checkpoint_dir = dir / "checkpoint";
  opts.resume = a.resume;
  opts.on_epoch = [](const EpochRecord& r) {
    char line[160];
    std::snprintf(line, sizeof line, "epoch %lld lr %.3g loss %.4f f1 %.4f valid f1 %.4f",
                  static_cast<long long>(r.epoch), r.lr, r.train_loss, r.train_f1, r.valid_f1);
    log::info(line);
  };
  const auto result = train(model, data, s.train, opts);

  save_weights(model, dir / "model.vsw");
  if (!result.best_state.empty()) {
    save_weights(mc, result.best_state, dir / "best.vsw");
  } else {
    save_weights(model, dir / "best.vsw");
  }
  result.history.write_csv(dir / "history.csv");
  std::vector<double> train_f1, valid_f1;
  for (const auto& r : result.history.records) {
    train_f1.push_back(r.train_f1);
    valid_f1.push_back(r.valid_f1);
  }
  write_png(render_line_chart({train_f1, valid_f1}, 0.0, 1.0), dir / "history.png");

  out << "train: " << tag << ", " << result.history.records.size() << " epochs, best valid F1 "
      << std::fixed << std::setprecision(4) << result.best_valid_f1 << " at epoch " << result.best_epoch << ", "
      << dir.string() << "\n";
  return 0;
}

// evaluate -------------------------------------------------------------------

struct EvaluateArgs {
  std::string cache;
  std::string model;
  std::string out;
  std::string arch;
  std::string average;
  std::vector<std::string> phases{"valid", "test"};
};

int cmd_evaluate(const CommonOptions& c, const EvaluateArgs& a, std::ostream& out) {
  FlatConfig flat;
  auto s = resolve_settings(c, &flat);
  if (!a.arch.empty()) s.architecture = parse_architecture(a.arch);
  if (!a.average.empty()) s.eval.averaging = parse_averaging(a.average);
  const auto tag = std::string(to_string(s.architecture));
  const fs::path model_path = or_default(a.model, fs::path(c.workdir) / "runs" / tag / "best.vsw");
  const fs::path cache = or_default(a.cache, fs::path(c.workdir) / "cache");
  const fs::path dir = or_default(a.out, fs::path(c.workdir) / "reports");
  if (!fs::exists(model_path)) {
    throw IoError("missing trained model: " + model_path.string() + " (run `vertseg train` first)");
  }
  require_file(cache / "index.json", "slice cache index");

  auto model = load_model(model_path);
  const auto& mc = model->config();
  auto eval = s.eval;
  eval.height = mc.input_height;
  eval.width = mc.input_width;
  eval.normalize = s.train.normalize;

  MetricsReport report;
  const auto samples = read_slice_cache(cache, plane_filter(s));
  for (Plane plane : s.planes) {
    for (const auto& name : a.phases) {
      const Phase phase = parse_phase(name);
      const bool any = std::any_of(samples.begin(), samples.end(),
                                   [&](const SliceSample& x) { return x.plane == plane && x.phase == phase; });
      if (!any) {
        log::warn("no " + name + " slices for plane " + std::string(to_string(plane)) + "; skipped");
        continue;
      }
      report.rows.push_back(evaluate(model, samples, plane, phase, eval));
    }
  }
  if (report.rows.empty()) throw Error("nothing to evaluate in " + cache.string());

  std::string flat_text;
  for (const auto& [k, v] : flat.values()) flat_text += k + "=" + v + "\n";
  report.provenance["config_hash"] = hex64(hash_string(flat_text + to_json(mc).dump()));
  report.provenance["dataset_id"] = file_hash(cache / "index.json");
  report.provenance["timestamp"] = utc_timestamp();
  report.provenance["model"] = model_path.string();
  report.provenance["averaging"] = std::string(to_string(eval.averaging));
  report.provenance["threshold"] = eval.threshold;
  report.write(dir, "metrics_" + std::string(to_string(mc.architecture)));
  out << report.to_markdown();
  return 0;
}

// predict --------------------------------------------------------------------

struct PredictArgs {
  std::string model;
  std::string input;
  std::string out;
  std::string arch;
};

int cmd_predict(const CommonOptions& c, const PredictArgs& a, std::ostream& out) {
  auto s = resolve_settings(c);
  if (!a.arch.empty()) s.architecture = parse_architecture(a.arch);
  const fs::path model_path =
      or_default(a.model, fs::path(c.workdir) / "runs" / std::string(to_string(s.architecture)) / "best.vsw");
  if (!fs::exists(model_path)) throw IoError("missing trained model: " + model_path.string());
  require_file(a.input, "input volume");
  const fs::path target = or_default(a.out, fs::path(c.workdir) / "predictions" / (volume_id_of(a.input) + "_mask.nii.gz"));

  auto model = load_model(model_path);
  const auto& mc = model->config();
  const auto predict = mask2_predictor(model);
  const Plane plane = s.planes.front();

  const Volume original = load_volume(a.input);
  const Volume unit = resample_to_unit_spacing(original, Interpolation::Linear);
  const int axis = unit.normal_axis(plane);
  const int64_t n = unit.extent(axis);
  Rng unused(0);
  std::vector<torch::Tensor> probs;
  for (int64_t begin = 0; begin < n; begin += s.eval.batch_size) {
    const int64_t end = std::min(n, begin + s.eval.batch_size);
    std::vector<torch::Tensor> batch;
    for (int64_t i = begin; i < end; ++i) {
      auto img = unit.data.select(axis, i).to(torch::kFloat32).contiguous();
      img = normalize_intensity(img, NormalizeMode::Eval, unused, s.train.normalize);
      batch.push_back(resize_image(img, mc.input_height, mc.input_width));
    }
    const auto p = predict(torch::stack(batch).unsqueeze(1));
    for (int64_t k = 0; k < p.size(0); ++k) {
      const auto& shape = unit.data.select(axis, begin + k).sizes();
      probs.push_back(resize_image(p[k][0], shape[0], shape[1]));
    }
  }
  auto volume_probs = torch::stack(probs, axis);
  volume_probs = F::interpolate(volume_probs.unsqueeze(0).unsqueeze(0),
                                F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>(original.data.sizes().begin(), original.data.sizes().end()))
                                    .mode(torch::kTrilinear)
                                    .align_corners(false))
                     .squeeze(0)
                     .squeeze(0);
  Volume mask = original;
  mask.data = (volume_probs >= s.eval.threshold).to(torch::kFloat32);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  save_volume(mask, target, VoxelType::UInt8);
  out << "predict: " << mask.data.sum().item<double>() << " foreground voxels, " << target.string() << "\n";
  return 0;
}

// ablate ---------------------------------------------------------------------

struct AblateArgs {
  std::string cache;
  std::string out;
  std::string seeds;
};

int cmd_ablate(const CommonOptions& c, const AblateArgs& a, std::ostream& out) {
  const auto s = resolve_settings(c);
  const fs::path cache = or_default(a.cache, fs::path(c.workdir) / "cache");
  const fs::path dir = or_default(a.out, fs::path(c.workdir) / "ablation");
  require_file(cache / "index.json", "slice cache index");

  AblationConfig cfg;
  cfg.seeds = a.seeds.empty() ? s.ablation_seeds : parse_seed_list(a.seeds);
  cfg.scale = s.scale;
  cfg.train = s.train;
  cfg.eval = s.eval;
  cfg.eval.normalize = s.train.normalize;
  const auto result = run_ablation(cfg, read_slice_cache(cache), [](const AblationRun& r) {
    log::info("ablation run done: seed " + std::to_string(r.seed) + " " + r.model);
  });
  result.write(dir);
  out << result.to_markdown();
  return 0;
}

// report ---------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
  std::string stem = "report";
  std::string baseline_model;
  std::string plusplus_model;
  std::string cache;
  int samples = 3;
};

int cmd_report(const CommonOptions& c, const ReportArgs& a, std::ostream& out) {
  const auto s = resolve_settings(c);
  const fs::path dir = or_default(a.out, fs::path(c.workdir) / "reports");
  std::vector<fs::path> inputs(a.inputs.begin(), a.inputs.end());
  if (inputs.empty()) {
    if (fs::is_directory(dir)) {
      for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("metrics_", 0) == 0 && e.path().extension() == ".csv") inputs.push_back(e.path());
      }
    }
    std::sort(inputs.begin(), inputs.end());
    if (inputs.empty()) throw IoError("missing metrics CSVs in " + dir.string() + " (run `vertseg evaluate` first)");
  }
  MetricsReport merged;
  for (const auto& p : inputs) {
    std::ifstream in(p);
    if (!in) throw IoError("missing metrics CSV: " + p.string());
    std::stringstream buf;
    buf << in.rdbuf();
    const auto part = MetricsReport::from_csv(buf.str());
    merged.rows.insert(merged.rows.end(), part.rows.begin(), part.rows.end());
    merged.provenance["sources"].push_back(p.string());
  }
  merged.provenance["timestamp"] = utc_timestamp();
  merged.write(dir, a.stem);

  if (!a.baseline_model.empty() || !a.plusplus_model.empty()) {
    require_file(a.baseline_model, "baseline model");
    require_file(a.plusplus_model, "plusplus model");
    const fs::path cache = or_default(a.cache, fs::path(c.workdir) / "cache");
    require_file(cache / "index.json", "slice cache index");
    auto baseline = load_model(a.baseline_model);
    auto plusplus = load_model(a.plusplus_model);
    EvaluateOptions eval = s.eval;
    eval.height = plusplus->config().input_height;
    eval.width = plusplus->config().input_width;
    eval.normalize = s.train.normalize;
    for (Plane plane : s.planes) {
      auto pool = read_slice_cache(cache, plane, Phase::Test);
      if (pool.empty()) pool = read_slice_cache(cache, plane);
      if (pool.empty()) continue;
      std::stable_sort(pool.begin(), pool.end(), [](const SliceSample& x, const SliceSample& y) {
        return x.mask.sum().item<double>() > y.mask.sum().item<double>();
      });
      pool.resize(std::min<size_t>(pool.size(), static_cast<size_t>(std::max(1, a.samples))));
      const auto png = dir / ("qualitative_" + std::string(to_string(plane)) + ".png");
      export_qualitative(baseline, plusplus, pool, png, eval);
      out << "qualitative: " << png.string() << "\n";
    }
  }
  out << merged.to_markdown();
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vertebra segmentation with DoubleU-Net and DoubleU-Net++", "vertseg"};
  app.require_subcommand(1);
  bool help_config = false;
  app.add_flag("--help-config", help_config, "list settings keys and exit");

  CommonOptions common;
  SynthArgs synth;
  PreprocessArgs pre;
  TrainArgs tr;
  EvaluateArgs ev;
  PredictArgs pr;
  AblateArgs ab;
  ReportArgs rp;

  auto* s_synth = app.add_subcommand("synth", "generate synthetic spine phantoms (NIfTI)");
  add_common(s_synth, common);
  s_synth->add_option("--out", synth.out, "output directory (images/ and masks/)");
  s_synth->add_option("--n", synth.n, "number of volumes");

  auto* s_pre = app.add_subcommand("preprocess", "resample, split and slice volumes into a cache");
  add_common(s_pre, common);
  s_pre->add_option("--in", pre.in, "dataset directory with images/ and masks/");
  s_pre->add_option("--out", pre.out, "slice cache directory");

  auto* s_train = app.add_subcommand("train", "train one model on the cached train slices");
  add_common(s_train, common);
  s_train->add_option("--cache", tr.cache, "slice cache directory");
  s_train->add_option("--out", tr.out, "run directory");
  s_train->add_option("--arch", tr.arch, "plusplus or baseline");
  s_train->add_flag("--resume", tr.resume, "continue from the run's checkpoint");

  auto* s_eval = app.add_subcommand("evaluate", "score a trained model per plane and phase");
  add_common(s_eval, common);
  s_eval->add_option("--cache", ev.cache, "slice cache directory");
  s_eval->add_option("--model", ev.model, "weights file (.vsw)");
  s_eval->add_option("--out", ev.out, "report directory");
  s_eval->add_option("--arch", ev.arch, "architecture for the default model path");
  s_eval->add_option("--average", ev.average, "micro or macro")->check(CLI::IsMember({"micro", "macro"}));
  s_eval->add_option("--phase", ev.phases, "phases to score")->delimiter(',');

  auto* s_pred = app.add_subcommand("predict", "segment one volume into a mask volume");
  add_common(s_pred, common);
  s_pred->add_option("--model", pr.model, "weights file (.vsw)");
  s_pred->add_option("--input", pr.input, "input volume")->required();
  s_pred->add_option("--out", pr.out, "output mask volume");
  s_pred->add_option("--arch", pr.arch, "architecture for the default model path");

  auto* s_abl = app.add_subcommand("ablate", "augmentation on/off grid for both models");
  add_common(s_abl, common);
  s_abl->add_option("--cache", ab.cache, "slice cache directory");
  s_abl->add_option("--out", ab.out, "ablation output directory");
  s_abl->add_option("--seeds", ab.seeds, "comma-separated seeds");

  auto* s_rep = app.add_subcommand("report", "merge metrics CSVs into a table; optional qualitative grid");
  add_common(s_rep, common);
  s_rep->add_option("--inputs", rp.inputs, "metrics CSV files (default: reports/metrics_*.csv)");
  s_rep->add_option("--out", rp.out, "report directory");
  s_rep->add_option("--stem", rp.stem, "output file stem");
  s_rep->add_option("--baseline-model", rp.baseline_model, "baseline weights for the qualitative grid");
  s_rep->add_option("--plusplus-model", rp.plusplus_model, "++ weights for the qualitative grid");
  s_rep->add_option("--cache", rp.cache, "slice cache for the qualitative grid");
  s_rep->add_option("--samples", rp.samples, "rows in the qualitative grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    if (help_config) {
      for (const auto& [key, desc] : config_schema()) out << key << "\n    " << desc << "\n";
      return 0;
    }
    const CLI::App* failing = &app;
    for (const auto* sub : app.get_subcommands()) failing = sub;
    err << "vertseg: " << e.what() << "\n\n" << failing->help();
    return 2;
  }

  log::set_verbose(common.verbose);
  try {
    if (s_synth->parsed()) return cmd_synth(common, synth, out);
    if (s_pre->parsed()) return cmd_preprocess(common, pre, out);
    if (s_train->parsed()) return cmd_train(common, tr, out);
    if (s_eval->parsed()) return cmd_evaluate(common, ev, out);
    if (s_pred->parsed()) return cmd_predict(common, pr, out);
    if (s_abl->parsed()) return cmd_ablate(common, ab, out);
    if (s_rep->parsed()) return cmd_report(common, rp, out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "vertseg: error: " << msg << "\n";
    return 1;
  }
  return 2;
}

}  // namespace vertseg
