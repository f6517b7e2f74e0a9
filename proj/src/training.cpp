#include "vertseg/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "vertseg/error.hpp"
#include "vertseg/log.hpp"
#include "vertseg/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vertseg {

int64_t TrainConfig::warmup_end() const {
  return static_cast<int64_t>(std::ceil(warmup_fraction * static_cast<double>(epochs) - 1e-9));
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr_start > 0 && lr_peak > 0 && lr_final > 0)) throw ConfigError("learning rates must be positive");
  if (!(lr_start < lr_peak)) throw ConfigError("lr_start must be below lr_peak");
  if (!(lr_final < lr_peak)) throw ConfigError("lr_final must be below lr_peak");
  if (!(warmup_fraction > 0 && warmup_fraction < 1)) throw ConfigError("warmup_fraction must lie in (0, 1)");
  if (warmup_end() >= epochs - 1) {
    throw ConfigError("schedule needs warmup_end < epochs - 1 (epochs=" + std::to_string(epochs) +
                      ", warmup_end=" + std::to_string(warmup_end()) + "); use more epochs");
  }
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0)) {
    throw ConfigError("invalid Adam hyperparameters");
  }
  if (w_bce < 0 || w_dice < 0) throw ConfigError("loss weights must be nonnegative");
  if (!(threshold > 0 && threshold < 1)) throw ConfigError("threshold must lie in (0, 1)");
  aug.validate();
}

double lr_at(int64_t epoch, const TrainConfig& cfg) {
  cfg.validate();
  if (epoch < 0 || epoch >= cfg.epochs) {
    throw ConfigError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  }
  const int64_t w = cfg.warmup_end();
  const int64_t last = cfg.epochs - 1;
  if (epoch == 0) return cfg.lr_start;
  if (epoch == w) return cfg.lr_peak;
  if (epoch == last) return cfg.lr_final;
  if (epoch < w) {
    return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * static_cast<double>(epoch) / static_cast<double>(w);
  }
  const double t = static_cast<double>(epoch - w) / static_cast<double>(last - w);
  return cfg.lr_peak * std::pow(cfg.lr_final / cfg.lr_peak, t);
}

torch::Tensor bce_dice_loss(const torch::Tensor& pred, const torch::Tensor& target, LossWeights weights) {
  if (pred.sizes() != target.sizes()) {
    std::ostringstream os;
    os << "bce_dice_loss: prediction shape " << pred.sizes() << " does not match target " << target.sizes();
    throw ShapeError(os.str());
  }
  if (pred.dim() < 1 || pred.numel() == 0) throw ShapeError("bce_dice_loss: empty input");
  if (!((target == 0) | (target == 1)).all().item<bool>()) {
    throw ShapeError("bce_dice_loss: target entries must be 0 or 1");
  }
  auto p = pred.clamp(kProbabilityFloor, 1.0 - kProbabilityFloor).flatten(1);
  auto g = target.to(pred.scalar_type()).flatten(1);
  auto bce = -(g * p.log() + (1 - g) * (1 - p).log()).mean(1);
  auto dice = 1 - (2 * (p * g).sum(1) + kDiceSmooth) / (p.sum(1) + g.sum(1) + kDiceSmooth);
  return (weights.bce * bce + weights.dice * dice).mean();
}

std::string TrainHistory::to_csv() const {
  std::string out = "epoch,lr,train_loss,train_f1,valid_loss,valid_f1,wall_time\n";
  char line[256];
  for (const auto& r : records) {
    std::snprintf(line, sizeof line, "%lld,%.9g,%.6f,%.6f,%.6f,%.6f,%.3f\n", static_cast<long long>(r.epoch), r.lr,
                  r.train_loss, r.train_f1, r.valid_loss, r.valid_f1, r.wall_time);
    out += line;
  }
  return out;
}

void TrainHistory::write_csv(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_csv();
}

json to_json(const TrainConfig& c) {
  json aug_p = json::object();
  for (int i = 0; i < kAugOpCount; ++i) {
    if (c.aug.op_probability[i] >= 0) aug_p[std::string(to_string(static_cast<AugOp>(i)))] = c.aug.op_probability[i];
  }
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_start", c.lr_start},
          {"lr_peak", c.lr_peak},
          {"lr_final", c.lr_final},
          {"warmup_fraction", c.warmup_fraction},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"w_bce", c.w_bce},
          {"w_dice", c.w_dice},
          {"supervise_mask1", c.supervise_mask1},
          {"augment", c.augment},
          {"aug",
           {{"p_set1", c.aug.p_set1},
            {"p_op", c.aug.p_op},
            {"op_probability", aug_p},
            {"rotation_deg", c.aug.rotation_deg},
            {"shear_deg", c.aug.shear_deg},
            {"zoom_lo", c.aug.zoom_lo},
            {"zoom_hi", c.aug.zoom_hi},
            {"shift_fraction", c.aug.shift_fraction},
            {"contrast_lo", c.aug.contrast_lo},
            {"contrast_hi", c.aug.contrast_hi},
            {"brightness", c.aug.brightness},
            {"crop_min_area", c.aug.crop_min_area}}},
          {"normalize",
           {{"divisor", c.normalize.divisor},
            {"max_shift", c.normalize.max_shift},
            {"scale_lo", c.normalize.scale_lo},
            {"scale_hi", c.normalize.scale_hi},
            {"literal_scale_range", c.normalize.literal_scale_range}}},
          {"threshold", c.threshold},
          {"seed", c.seed},
          {"deterministic", c.deterministic}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    auto get = [&](const json& obj, const char* key, auto& field) {
      if (obj.contains(key)) obj.at(key).get_to(field);
    };
    get(j, "epochs", c.epochs);
    get(j, "batch_size", c.batch_size);
    get(j, "lr_start", c.lr_start);
    get(j, "lr_peak", c.lr_peak);
    get(j, "lr_final", c.lr_final);
    get(j, "warmup_fraction", c.warmup_fraction);
    get(j, "beta1", c.beta1);
    get(j, "beta2", c.beta2);
    get(j, "adam_eps", c.adam_eps);
    get(j, "w_bce", c.w_bce);
    get(j, "w_dice", c.w_dice);
    get(j, "supervise_mask1", c.supervise_mask1);
    get(j, "augment", c.augment);
    get(j, "threshold", c.threshold);
    get(j, "seed", c.seed);
    get(j, "deterministic", c.deterministic);
    if (j.contains("aug")) {
      const auto& a = j.at("aug");
      get(a, "p_set1", c.aug.p_set1);
      get(a, "p_op", c.aug.p_op);
      get(a, "rotation_deg", c.aug.rotation_deg);
      get(a, "shear_deg", c.aug.shear_deg);
      get(a, "zoom_lo", c.aug.zoom_lo);
      get(a, "zoom_hi", c.aug.zoom_hi);
      get(a, "shift_fraction", c.aug.shift_fraction);
      get(a, "contrast_lo", c.aug.contrast_lo);
      get(a, "contrast_hi", c.aug.contrast_hi);
      get(a, "brightness", c.aug.brightness);
      get(a, "crop_min_area", c.aug.crop_min_area);
      if (a.contains("op_probability")) {
        for (const auto& [name, p] : a.at("op_probability").items()) c.aug.set_probability(parse_aug_op(name), p);
      }
    }
    if (j.contains("normalize")) {
      const auto& n = j.at("normalize");
      get(n, "divisor", c.normalize.divisor);
      get(n, "max_shift", c.normalize.max_shift);
      get(n, "scale_lo", c.normalize.scale_lo);
      get(n, "scale_hi", c.normalize.scale_hi);
      get(n, "literal_scale_range", c.normalize.literal_scale_range);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed training config: ") + e.what());
  }
  return c;
}

std::pair<torch::Tensor, torch::Tensor> eval_batch(const std::vector<SliceSample>& samples, size_t begin,
                                                   size_t end, int64_t height, int64_t width,
                                                   const NormalizeOptions& normalize) {
  std::vector<torch::Tensor> xs, ys;
  Rng unused(0);
  for (size_t i = begin; i < end; ++i) {
    const auto& s = samples[i];
    xs.push_back(normalize_intensity(resize_image(s.image, height, width), NormalizeMode::Eval, unused, normalize));
    ys.push_back((resize_mask(s.mask.to(torch::kFloat32), height, width) > 0.5).to(torch::kFloat32));
  }
  return {torch::stack(xs).unsqueeze(1), torch::stack(ys).unsqueeze(1)};
}

namespace {

struct ModeGuard {
  torch::nn::Module& m;
  bool was_training;
  explicit ModeGuard(torch::nn::Module& module) : m(module), was_training(module.is_training()) {}
  ~ModeGuard() { m.train(was_training); }
};

torch::Tensor supervised_loss(const NetworkOutput& out, const torch::Tensor& y, const TrainConfig& cfg) {
  const LossWeights w{cfg.w_bce, cfg.w_dice};
  auto loss = bce_dice_loss(out.mask2, y, w);
  if (cfg.supervise_mask1) loss = loss + bce_dice_loss(out.mask1, y, w);
  return loss;
}

std::string sample_key(const SliceSample& s) { return s.volume_id + "/" + std::string(to_string(s.plane)); }

void apply_determinism(const TrainConfig& cfg) {
  if (!cfg.deterministic) return;
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
}

json schedule_fields(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},       {"batch_size", cfg.batch_size},
          {"lr_start", cfg.lr_start},   {"lr_peak", cfg.lr_peak},
          {"lr_final", cfg.lr_final},   {"warmup_fraction", cfg.warmup_fraction},
          {"seed", cfg.seed}};
}

json record_to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},           {"lr", r.lr},         {"train_loss", r.train_loss},
          {"train_f1", r.train_f1},     {"valid_loss", r.valid_loss}, {"valid_f1", r.valid_f1},
          {"wall_time", r.wall_time}};
}

EpochRecord record_from_json(const json& j) {
  EpochRecord r;
  j.at("epoch").get_to(r.epoch);
  j.at("lr").get_to(r.lr);
  j.at("train_loss").get_to(r.train_loss);
  j.at("train_f1").get_to(r.train_f1);
  j.at("valid_loss").get_to(r.valid_loss);
  j.at("valid_f1").get_to(r.valid_f1);
  j.at("wall_time").get_to(r.wall_time);
  return r;
}

void write_checkpoint(const fs::path& dir, DoubleUNet& model, torch::optim::Adam& optimizer, const TrainConfig& cfg,
                      const TrainResult& state) {
  fs::create_directories(dir);
  save_weights(model, dir / "model.vsw.tmp");
  torch::save(optimizer, (dir / "optimizer.pt.tmp").string());
  if (!state.best_state.empty()) save_weights(model->config(), state.best_state, dir / "best.vsw.tmp");
  json history = json::array();
  for (const auto& r : state.history.records) history.push_back(record_to_json(r));
  json j{{"schema_version", 1},
         {"next_epoch", state.next_epoch},
         {"best_epoch", state.best_epoch},
         {"best_valid_f1", state.best_valid_f1},
         {"schedule", schedule_fields(cfg)},
         {"train_config", to_json(cfg)},
         {"history", history}};
  {
    std::ofstream out(dir / "state.json.tmp", std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint in " + dir.string());
    out << j.dump(1) << "\n";
  }
  fs::rename(dir / "model.vsw.tmp", dir / "model.vsw");
  fs::rename(dir / "optimizer.pt.tmp", dir / "optimizer.pt");
  if (!state.best_state.empty()) fs::rename(dir / "best.vsw.tmp", dir / "best.vsw");
  fs::rename(dir / "state.json.tmp", dir / "state.json");
}

TrainResult read_checkpoint(const fs::path& dir, DoubleUNet& model, torch::optim::Adam& optimizer,
                            const TrainConfig& cfg) {
  const auto state_path = dir / "state.json";
  if (!fs::exists(state_path)) throw IoError("missing checkpoint: " + state_path.string());
  json j;
  try {
    std::ifstream in(state_path);
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("corrupt checkpoint " + state_path.string() + ": " + e.what());
  }
  TrainResult r;
  try {
    const auto expected = schedule_fields(cfg);
    const auto diff = diff_configs(j.at("schedule"), expected);
    if (!diff.empty()) {
      throw ConfigError("checkpoint in " + dir.string() + " was written with a different schedule:\n" + diff);
    }
    j.at("next_epoch").get_to(r.next_epoch);
    j.at("best_epoch").get_to(r.best_epoch);
    j.at("best_valid_f1").get_to(r.best_valid_f1);
    for (const auto& rec : j.at("history")) r.history.records.push_back(record_from_json(rec));
  } catch (const json::exception& e) {
    throw FormatError("corrupt checkpoint " + state_path.string() + ": " + e.what());
  }
  if (r.next_epoch != static_cast<int64_t>(r.history.records.size())) {
    throw FormatError("corrupt checkpoint " + state_path.string() + ": history length does not match next_epoch");
  }
  load_weights(model, dir / "model.vsw");
  if (!fs::exists(dir / "optimizer.pt")) throw IoError("missing checkpoint file: " + (dir / "optimizer.pt").string());
  try {
    torch::load(optimizer, (dir / "optimizer.pt").string());
  } catch (const c10::Error& e) {
    throw FormatError("corrupt optimizer state in " + dir.string() + ": " + e.what_without_backtrace());
  }
  if (fs::exists(dir / "best.vsw")) r.best_state = read_tensor_archive(dir / "best.vsw").tensors;
  return r;
}

}  // namespace

EvalPass evaluate_samples(DoubleUNet& model, const std::vector<SliceSample>& samples, const TrainConfig& cfg) {
  EvalPass pass;
  if (samples.empty()) return pass;
  ModeGuard guard(*model);
  model->eval();
  torch::NoGradGuard no_grad;
  const auto& mc = model->config();
  double loss_sum = 0.0;
  for (size_t b = 0; b < samples.size(); b += static_cast<size_t>(cfg.batch_size)) {
    const size_t e = std::min(samples.size(), b + static_cast<size_t>(cfg.batch_size));
    auto [x, y] = eval_batch(samples, b, e, mc.input_height, mc.input_width, cfg.normalize);
    auto out = model->forward(x);
    loss_sum += supervised_loss(out, y, cfg).item<double>() * static_cast<double>(e - b);
    pass.counts += confusion_counts(out.mask2, y, cfg.threshold);
  }
  pass.loss = loss_sum / static_cast<double>(samples.size());
  return pass;
}

TrainResult train(DoubleUNet& model, const SliceDataset& data, const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (data.train.empty()) throw TrainingError("training set is empty");
  if (options.resume && !options.checkpoint_dir) throw ConfigError("resume requested without a checkpoint directory");
  apply_determinism(cfg);

  const auto& mc = model->config();
  const int64_t h = mc.input_height, w = mc.input_width;
  torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(cfg.lr_start)
                                                        .betas({cfg.beta1, cfg.beta2})
                                                        .eps(cfg.adam_eps));
  TrainResult result;
  if (options.resume) result = read_checkpoint(*options.checkpoint_dir, model, optimizer, cfg);
  const double wall_offset = result.history.records.empty() ? 0.0 : result.history.records.back().wall_time;
  const auto start = std::chrono::steady_clock::now();
  const int64_t stop = std::min(cfg.epochs, options.stop_after.value_or(cfg.epochs));
  const size_t n = data.train.size();
  const auto bs = static_cast<size_t>(cfg.batch_size);

  for (int64_t epoch = result.next_epoch; epoch < stop; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    for (auto& group : optimizer.param_groups()) {
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
    }
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    Rng shuffle(derive_seed(cfg.seed, "order", 0, epoch));
    for (size_t i = n - 1; i > 0; --i) std::swap(order[i], order[uniform_index(shuffle, i + 1)]);

    model->train();
    double loss_sum = 0.0;
    ConfusionCounts counts;
    int64_t step = 0;
    for (size_t b = 0; b < n; b += bs, ++step) {
      const size_t e = std::min(n, b + bs);
      std::vector<torch::Tensor> xs, ys;
      for (size_t i = b; i < e; ++i) {
        const auto& s = data.train[order[i]];
        Rng rng(derive_seed(cfg.seed, sample_key(s), s.slice_index, epoch));
        SliceSample prepared = s;
        prepared.image = normalize_intensity(resize_image(s.image, h, w), NormalizeMode::Train, rng, cfg.normalize);
        prepared.mask = (resize_mask(s.mask.to(torch::kFloat32), h, w) > 0.5).to(torch::kFloat32);
        if (cfg.augment) prepared = augment(prepared, cfg.aug, rng).sample;
        xs.push_back(prepared.image);
        ys.push_back(prepared.mask);
      }
      auto x = torch::stack(xs).unsqueeze(1);
      auto y = torch::stack(ys).unsqueeze(1);
      optimizer.zero_grad();
      auto out = model->forward(x);
      auto loss = supervised_loss(out, y, cfg);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      }
      loss.backward();
      optimizer.step();
      loss_sum += value * static_cast<double>(e - b);
      counts += confusion_counts(out.mask2.detach(), y, cfg.threshold);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.train_f1 = metrics_from_counts(counts).f1;
    if (!data.valid.empty()) {
      auto v = evaluate_samples(model, data.valid, cfg);
      rec.valid_loss = v.loss;
      rec.valid_f1 = metrics_from_counts(v.counts).f1;
    }
    rec.wall_time = wall_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const double selection = data.valid.empty() ? rec.train_f1 : rec.valid_f1;
    if (selection > result.best_valid_f1) {
      result.best_valid_f1 = selection;
      result.best_epoch = epoch;
      result.best_state = snapshot_state(*model);
    }
    result.history.records.push_back(rec);
    result.next_epoch = epoch + 1;
    if (log::verbose()) {
      char line[160];
      std::snprintf(line, sizeof line, "epoch %lld lr %.3g train_loss %.4f train_f1 %.4f valid_f1 %.4f",
                    static_cast<long long>(epoch), lr, rec.train_loss, rec.train_f1, rec.valid_f1);
      log::info(line);
    }
    if (options.on_epoch) options.on_epoch(rec);
    if (options.checkpoint_dir) write_checkpoint(*options.checkpoint_dir, model, optimizer, cfg, result);
  }
  return result;
}

}  // namespace vertseg
