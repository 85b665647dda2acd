#include "cli.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <random>
#include <sstream>

#include "csformer/checkpoint.hpp"
#include "csformer/error.hpp"
#include "csformer/grad_suite.hpp"
#include "csformer/image.hpp"
#include "csformer/inference.hpp"
#include "csformer/maeip.hpp"
#include "csformer/metrics.hpp"
#include "csformer/train.hpp"

namespace csformer::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config files ----------------------------------------------------------

json read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw ConfigError(path.string() + ": expected a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items())
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError("unknown config key \"" + key + "\"");
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key \"") + key + "\" has the wrong type");
  }
}

void require_positive(double value, const char* key) {
  if (!(value > 0.0)) throw ConfigError(std::string("config key \"") + key + "\" must be positive");
}

ModelConfig model_from(const json& j) {
  if (!j.contains("model")) return ModelConfig::nano();
  const json& m = j.at("model");
  if (m.is_string()) return ModelConfig::preset(m.get<std::string>());
  if (m.is_object()) return ModelConfig::from_json(m.dump());
  throw ConfigError("config key \"model\" must be a preset name or an object");
}

// ---- helpers ---------------------------------------------------------------

void require_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw IoError("no such file: " + path.string());
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::pair<int, int> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(text);
    std::size_t used_h = 0, used_w = 0;
    const int h = std::stoi(text.substr(0, x), &used_h);
    const int w = std::stoi(text.substr(x + 1), &used_w);
    if (used_h != x || used_w != text.size() - x - 1 || h < 1 || w < 1) throw std::invalid_argument(text);
    return {h, w};
  } catch (const std::logic_error&) {
    throw ConfigError("size \"" + text + "\" is not of the form HxW");
  }
}

std::string format_db(double v) { return std::isinf(v) ? "inf" : fmt::format("{:.4f}", v); }

struct LoadedModel {
  ModelConfig config;
  ParamStore<float> params;
};

LoadedModel load_checkpoint(const fs::path& path) {
  require_file(path);
  require_file(config_sidecar(path));
  LoadedModel m{load_model_config(path), {}};
  m.config.pretrain_mode = false;
  m.params = init_params<float>(m.config, {0, true});
  const LoadReport report = load_params(Archive::load(path), m.params);
  if (!report.missing.empty())
    throw CheckpointError(path.string() + " lacks " + std::to_string(report.missing.size()) + " model tensors, e.g. " +
                          report.missing.front());
  return m;
}

// ---- subcommands -----------------------------------------------------------

struct SynthArgs {
  fs::path out_dir;
  int count = 8;
  int height = 64;
  int width = 64;
  std::string task = "denoise";
  double sigma = 25.0;
  int rain_count = RainParams{}.count;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a, std::ostream& out) {
  if (a.task != "denoise" && a.task != "derain") throw ConfigError("task must be denoise or derain");
  if (a.count < 1 || a.height < 1 || a.width < 1) throw ConfigError("count, height and width must be positive");
  fs::create_directories(a.out_dir / "clean");
  fs::create_directories(a.out_dir / "degraded");
  std::mt19937_64 rng(a.seed);
  RainParams rain;
  rain.count = a.rain_count;
  for (int i = 0; i < a.count; ++i) {
    const ImageBuffer clean = synth_scene(a.height, a.width, rng);
    const ImageBuffer degraded = a.task == "denoise" ? degrade_awgn(clean, a.sigma, rng) : degrade_rain(clean, rain, rng);
    const std::string name = fmt::format("{:04d}.png", i);
    save_png(a.out_dir / "clean" / name, clean);
    save_png(a.out_dir / "degraded" / name, degraded);
  }
  fmt::print(out, "wrote {} {} pairs to {}\n", a.count, a.task, a.out_dir.string());
  return kOk;
}

int run_pretrain_cmd(const fs::path& config_path, std::ostream& out) {
  const json j = read_config(config_path);
  reject_unknown_keys(j, {"patch_size", "mask_ratio", "epochs", "stage_split", "lambda_dec", "fill_mode", "corpus_dir",
                          "seed", "model", "batch", "crop", "lr", "lr_min", "weight_decay", "joint_encoder_loss",
                          "out_dir"});
  if (!j.contains("corpus_dir")) throw ConfigError("config key \"corpus_dir\" is required");
  ModelConfig config = model_from(j);
  PretrainConfig pc;
  pc.patch_size = get_or(j, "patch_size", pc.patch_size);
  pc.mask_ratio = get_or(j, "mask_ratio", pc.mask_ratio);
  pc.epochs = get_or(j, "epochs", pc.epochs);
  pc.stage_split = get_or(j, "stage_split", pc.stage_split);
  pc.lambda_dec = get_or(j, "lambda_dec", pc.lambda_dec);
  pc.joint_encoder_loss = get_or(j, "joint_encoder_loss", pc.joint_encoder_loss);
  pc.batch = get_or(j, "batch", pc.batch);
  pc.crop = get_or(j, "crop", pc.crop);
  pc.lr = get_or(j, "lr", pc.lr);
  pc.lr_min = get_or(j, "lr_min", pc.lr_min);
  pc.weight_decay = get_or(j, "weight_decay", pc.weight_decay);
  pc.seed = get_or(j, "seed", pc.seed);
  const std::string fill = get_or<std::string>(j, "fill_mode", "zero");
  if (fill != "zero" && fill != "learnable") throw ConfigError("fill_mode must be zero or learnable");
  pc.fill_mode = fill == "zero" ? FillMode::kZero : FillMode::kLearnable;
  require_positive(pc.lr, "lr");
  const fs::path out_dir = get_or<std::string>(j, "out_dir", "pretrain_out");

  std::vector<ImageBuffer> corpus;
  for (const auto& file : list_png_files(get_or<std::string>(j, "corpus_dir", ""))) corpus.push_back(load_png(file));
  if (corpus.empty()) throw IoError("corpus_dir holds no PNG images");

  auto params = init_params<float>(config, {pc.seed, true});
  add_pretrain_params(params, config, pc.fill_mode, pc.seed + 1);
  std::ofstream log = open_output(out_dir / "pretrain_log.csv");
  log << "epoch,loss_enc,loss_dec\n";
  run_pretraining(corpus, params, config, pc, [&](const EpochRecord& r) {
    log << fmt::format("{},{:.8g},{:.8g}\n", r.epoch, r.loss_enc, r.loss_dec) << std::flush;
    fmt::print(out, "epoch {} ({}) loss_enc {:.6f} loss_dec {:.6f}\n", r.epoch,
               r.stage == PretrainStage::kEncoderOnly ? "encoder" : "joint", r.loss_enc, r.loss_dec);
  });
  save_model(out_dir / "pretrained.cskpt", params, config);
  fmt::print(out, "saved {}\n", (out_dir / "pretrained.cskpt").string());
  return kOk;
}

int run_finetune_cmd(const fs::path& config_path, std::ostream& out) {
  const json j = read_config(config_path);
  reject_unknown_keys(j, {"task", "crop", "batch", "steps", "lr", "lr_min", "weight_decay", "seed", "init_checkpoint",
                          "resume", "out_dir", "data_dir", "model", "augment", "keep_output_conv"});
  if (!j.contains("data_dir")) throw ConfigError("config key \"data_dir\" is required");
  if (j.contains("init_checkpoint") && j.contains("model"))
    throw ConfigError("\"model\" and \"init_checkpoint\" are mutually exclusive");
  FinetuneConfig ft;
  ft.task = get_or(j, "task", ft.task);
  ft.crop = get_or(j, "crop", ft.crop);
  ft.batch = get_or(j, "batch", ft.batch);
  ft.steps = get_or(j, "steps", ft.steps);
  ft.lr = get_or(j, "lr", ft.lr);
  ft.lr_min = get_or(j, "lr_min", ft.lr_min);
  ft.weight_decay = get_or(j, "weight_decay", ft.weight_decay);
  ft.seed = get_or(j, "seed", ft.seed);
  if (j.contains("augment")) {
    const json& aug = j.at("augment");
    if (!aug.is_object()) throw ConfigError("config key \"augment\" must be an object");
    reject_unknown_keys(aug, {"hflip", "vflip", "rot90", "mixup", "mixup_alpha"});
    ft.augment.hflip = get_or(aug, "hflip", ft.augment.hflip);
    ft.augment.vflip = get_or(aug, "vflip", ft.augment.vflip);
    ft.augment.rot90 = get_or(aug, "rot90", ft.augment.rot90);
    ft.augment.mixup = get_or(aug, "mixup", ft.augment.mixup);
    ft.augment.mixup_alpha = get_or(aug, "mixup_alpha", ft.augment.mixup_alpha);
  }
  if (ft.task.empty()) throw ConfigError("config key \"task\" must not be empty");
  if (ft.steps < 1 || ft.batch < 1 || ft.crop < 1) throw ConfigError("steps, batch and crop must be positive");
  require_positive(ft.lr, "lr");
  const fs::path out_dir = get_or<std::string>(j, "out_dir", "finetune_out");
  const fs::path data_dir = get_or<std::string>(j, "data_dir", "");
  const std::vector<ImagePair> pairs = load_pairs(data_dir / "degraded", data_dir / "clean");

  ModelConfig config = model_from(j);
  ParamStore<float> params;
  if (j.contains("init_checkpoint")) {
    const fs::path init = get_or<std::string>(j, "init_checkpoint", "");
    require_file(init);
    require_file(config_sidecar(init));
    config = load_model_config(init);
    config.pretrain_mode = false;
    params = init_params<float>(config, {ft.seed, true});
    const LoadReport report =
        load_pretrained(Archive::load(init), params, get_or(j, "keep_output_conv", false));
    fmt::print(out, "initialised {} tensors from {}; {} fresh, {} unused\n", report.loaded.size(), init.string(),
               report.missing.size(), report.unused.size());
  } else {
    params = init_params<float>(config, {ft.seed, true});
  }
  OptimState<float> opt(params, {});
  if (j.contains("resume")) {
    const fs::path resume = get_or<std::string>(j, "resume", "");
    require_file(resume);
    load_train_state(resume, params, opt);
    fmt::print(out, "resumed at step {}\n", opt.step);
  }

  std::ofstream log = open_output(out_dir / "finetune_log.csv");
  log << "step,lr,loss,train_psnr\n";
  const std::int64_t report_every = std::max<std::int64_t>(1, ft.steps / 20);
  run_finetune(pairs, params, config, opt, ft, [&](const StepRecord& r) {
    log << fmt::format("{},{:.8g},{:.8g},{:.6f}\n", r.step, r.lr, r.loss, r.train_psnr);
    if (r.step % report_every == 0 || r.step + 1 == ft.steps)
      fmt::print(out, "step {} lr {:.3e} loss {:.6f} psnr {:.3f}\n", r.step, r.lr, r.loss, r.train_psnr);
    return true;
  });
  save_model(out_dir / "model.cskpt", params, config);
  save_train_state(out_dir / "train_state.cskpt", params, opt, config);
  fmt::print(out, "saved {}\n", (out_dir / "model.cskpt").string());
  return kOk;
}

int run_infer(const fs::path& checkpoint, const fs::path& in_path, const fs::path& out_path, bool input_padding,
              std::ostream& out) {
  require_file(in_path);
  const LoadedModel m = load_checkpoint(checkpoint);
  const ImageBuffer image = load_png(in_path);
  if (image.channels != m.config.in_channels)
    throw ShapeError(fmt::format("{} has {} channels, the model expects {}", in_path.string(), image.channels,
                                 m.config.in_channels));
  const Tensor32 batch = to_batch(std::span(&image, 1));
  const Tensor32 restored = input_padding ? infer_input_padded(batch, m.params, m.config)
                                          : infer_full_image(batch, m.params, m.config);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  save_png(out_path, from_batch(restored, 0));
  fmt::print(out, "wrote {} ({}x{})\n", out_path.string(), image.height, image.width);
  return kOk;
}

struct BenchArgs {
  std::string model = "nano";
  fs::path checkpoint;
  std::vector<std::string> sizes{"16x16", "17x23", "100x100", "128x128"};
  int repeat = 3;
  std::uint64_t seed = 0;
  fs::path out_path;
};

int run_bench(const BenchArgs& a, std::ostream& out) {
  if (a.repeat < 1) throw ConfigError("repeat must be positive");
  LoadedModel m;
  if (!a.checkpoint.empty()) {
    m = load_checkpoint(a.checkpoint);
  } else {
    m.config = ModelConfig::preset(a.model);
    m.params = init_params<float>(m.config, {a.seed, false});
  }
  std::vector<std::pair<int, int>> sizes;
  for (const auto& s : a.sizes) sizes.push_back(parse_size(s));

  std::ofstream file;
  if (!a.out_path.empty()) file = open_output(a.out_path);
  std::ostream& csv = a.out_path.empty() ? out : file;
  csv << "H,W,path,macs_total,macs_conv,macs_attn,wall_ms,max_abs_diff_vs_baseline\n";
  std::mt19937_64 rng(a.seed);
  for (auto [h, w] : sizes) {
    ImageBuffer image = synth_scene(h, w, rng);
    image.channels = m.config.in_channels;
    image.pixels.resize(image.plane() * image.channels, 0.5f);
    const Tensor32 batch = to_batch(std::span(&image, 1));
    auto timed = [&](auto&& run) {
      std::vector<double> ms;
      Tensor32 result;
      for (int r = 0; r < a.repeat; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        result = run();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
      }
      std::nth_element(ms.begin(), ms.begin() + ms.size() / 2, ms.end());
      return std::pair{result, ms[ms.size() / 2]};
    };
    const auto [padded, padded_ms] = timed([&] { return infer_full_image(batch, m.params, m.config); });
    const auto [baseline, baseline_ms] = timed([&] { return infer_input_padded(batch, m.params, m.config); });
    double diff = 0.0;
    for (std::int64_t i = 0; i < padded.numel(); ++i)
      diff = std::max(diff, static_cast<double>(std::abs(padded.data()[i] - baseline.data()[i])));
    const MacReport macs = count_macs(m.config, h, w);
    auto row = [&](const char* path, const MacBreakdown& b, double ms, double d) {
      csv << fmt::format("{},{},{},{},{},{},{:.3f},{:.3g}\n", h, w, path, b.total(), b.conv(), b.attention(), ms, d);
    };
    row("feature_padded", macs.padded, padded_ms, diff);
    row("input_padded", macs.baseline, baseline_ms, 0.0);
  }
  return kOk;
}

int run_gradcheck(const std::string& preset, int samples, std::uint64_t seed, std::ostream& out) {
  const ModelConfig config = ModelConfig::preset(preset);
  if (samples < 1) throw ConfigError("samples must be positive");
  GradSuiteOptions options;
  options.samples = samples;
  options.seed = seed;
  const auto report = run_gradient_suite(config, options, [&](const GradCase& c) {
    fmt::print(out, "{:<28} samples {}  coords {:>5}  max rel err {:.3e}  {}\n", c.name, c.samples,
               c.report.coords_checked, c.report.max_rel_err, c.report.pass ? "ok" : "FAIL");
  });
  fmt::print(out, "max rel err {:.3e} (tolerance {:.0e})\n", report.max_rel_err, options.check.tol);
  return report.pass ? kOk : kCheckFailed;
}

int run_eval(const std::vector<std::string>& dirs, const fs::path& out_path, std::ostream& out) {
  const fs::path clean_dir = dirs.at(0), restored_dir = dirs.at(1);
  const auto files = list_png_files(clean_dir);
  if (!fs::is_directory(restored_dir)) throw IoError("not a directory: " + restored_dir.string());
  if (files.empty()) throw IoError("no PNG images in " + clean_dir.string());
  std::ofstream file;
  if (!out_path.empty()) file = open_output(out_path);
  std::ostream& csv = out_path.empty() ? out : file;
  csv << "image,psnr_db,ssim,mae\n";
  double psnr_sum = 0.0, ssim_sum = 0.0, mae_sum = 0.0;
  for (const auto& clean_path : files) {
    const fs::path restored_path = restored_dir / clean_path.filename();
    require_file(restored_path);
    const ImageBuffer clean = load_png(clean_path), restored = load_png(restored_path);
    if (!clean.same_shape(restored)) throw ShapeError("shape mismatch for " + clean_path.filename().string());
    const MetricsRecord r = evaluate_pair(clean, restored);
    psnr_sum += r.psnr_db;
    ssim_sum += r.ssim;
    mae_sum += r.mae;
    csv << fmt::format("{},{},{:.6f},{:.6f}\n", clean_path.filename().string(), format_db(r.psnr_db), r.ssim, r.mae);
  }
  const double n = static_cast<double>(files.size());
  csv << fmt::format("mean,{},{:.6f},{:.6f}\n", format_db(psnr_sum / n), ssim_sum / n, mae_sum / n);
  return kOk;
}

int fail(std::ostream& err, int code, const char* kind, const std::string& message) {
  err << "error (" << kind << "): " << message << "\n";
  return code;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"CSformer restoration transformer and MAEIP pre-training"};
  app.name(args.empty() ? "csformer" : fs::path(args.front()).filename().string());
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write synthetic clean/degraded PNG pairs");
  synth_cmd->add_option("--out", synth.out_dir, "Output directory (gets clean/ and degraded/)")->required();
  synth_cmd->add_option("--count", synth.count, "Number of pairs");
  synth_cmd->add_option("--height", synth.height, "Image height");
  synth_cmd->add_option("--width", synth.width, "Image width");
  synth_cmd->add_option("--task", synth.task, "denoise or derain");
  synth_cmd->add_option("--sigma", synth.sigma, "Noise level on the 0-255 scale");
  synth_cmd->add_option("--streaks", synth.rain_count, "Rain streaks per image");
  synth_cmd->add_option("--seed", synth.seed, "Random seed");

  fs::path pretrain_config;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "MAEIP pre-training from a JSON config");
  pretrain_cmd->add_option("--config", pretrain_config, "JSON config file")->required();

  fs::path finetune_config;
  auto* finetune_cmd = app.add_subcommand("finetune", "Restoration fine-tuning from a JSON config");
  finetune_cmd->add_option("--config", finetune_config, "JSON config file")->required();

  fs::path infer_checkpoint, infer_in, infer_out;
  bool infer_input_padding = false;
  auto* infer_cmd = app.add_subcommand("infer", "Restore one PNG image");
  infer_cmd->add_option("--checkpoint", infer_checkpoint, "Model checkpoint")->required();
  infer_cmd->add_option("--in", infer_in, "Input PNG")->required();
  infer_cmd->add_option("--out", infer_out, "Output PNG")->required();
  infer_cmd->add_flag("--input-padding", infer_input_padding, "Pad the input to a multiple of 128 instead");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Compare feature padding with input padding");
  bench_cmd->add_option("--model", bench.model, "Preset (nano or toy) with random weights");
  bench_cmd->add_option("--checkpoint", bench.checkpoint, "Use trained weights instead");
  bench_cmd->add_option("--sizes", bench.sizes, "Input sizes as HxW")->delimiter(',');
  bench_cmd->add_option("--repeat", bench.repeat, "Timed runs per path (median reported)");
  bench_cmd->add_option("--seed", bench.seed, "Random seed");
  bench_cmd->add_option("--out", bench.out_path, "CSV file (default stdout)");

  std::string grad_preset;
  int grad_samples = 5;
  std::uint64_t grad_seed = 1;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite at 64-bit");
  grad_cmd->add_option("--config", grad_preset, "Model preset (nano or toy)")->required();
  grad_cmd->add_option("--samples", grad_samples, "Random inputs per case");
  grad_cmd->add_option("--seed", grad_seed, "Random seed");

  std::vector<std::string> eval_dirs;
  fs::path eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "PSNR, SSIM and MAE over paired directories");
  eval_cmd->add_option("--pairs", eval_dirs, "Clean and restored directories")->expected(2)->required();
  eval_cmd->add_option("--out", eval_out, "CSV file (default stdout)");

  try {
    std::vector<std::string> reversed(args.begin() + (args.empty() ? 0 : 1), args.end());
    std::reverse(reversed.begin(), reversed.end());
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    app.exit(e, out, err);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return fail(err, kUsageError, "usage", std::string(e.what()) + "\nRun with --help for usage.");
  }

  try {
    if (*synth_cmd) return run_synth(synth, out);
    if (*pretrain_cmd) return run_pretrain_cmd(pretrain_config, out);
    if (*finetune_cmd) return run_finetune_cmd(finetune_config, out);
    if (*infer_cmd) return run_infer(infer_checkpoint, infer_in, infer_out, infer_input_padding, out);
    if (*bench_cmd) return run_bench(bench, out);
    if (*grad_cmd) return run_gradcheck(grad_preset, grad_samples, grad_seed, out);
    if (*eval_cmd) return run_eval(eval_dirs, eval_out, out);
  } catch (const IoError& e) {
    return fail(err, kMissingFile, "file", e.what());
  } catch (const ConfigError& e) {
    return fail(err, kInvalidConfig, "config", e.what());
  } catch (const CheckpointError& e) {
    return fail(err, kCheckpointError, "checkpoint", e.what());
  } catch (const ShapeError& e) {
    return fail(err, kShapeError, "shape", e.what());
  } catch (const std::exception& e) {
    return fail(err, kInternalError, "internal", e.what());
  }
  return fail(err, kUsageError, "usage", "no subcommand given");
}

}  // namespace csformer::cli
