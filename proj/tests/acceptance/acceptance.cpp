// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails. `--only 2,5` runs a subset.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "csformer/checkpoint.hpp"
#include "csformer/grad_suite.hpp"
#include "csformer/image.hpp"
#include "csformer/inference.hpp"
#include "csformer/maeip.hpp"
#include "csformer/metrics.hpp"
#include "csformer/model.hpp"
#include "csformer/runtime.hpp"
#include "csformer/train.hpp"

using namespace csformer;

namespace {

// ---- tolerances and budgets ---------------------------------------------

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 300.0;
constexpr double kEquivTol = 1e-5;
constexpr double kMaskFreqLo = 0.73, kMaskFreqHi = 0.77;
// Overfit threshold. A calibration run at these settings reached 35.35 dB at
// step 500 and 40.77 dB at step 2000 (train PSNR over all eight crops).
constexpr double kOverfitPsnrDb = 35.0;
constexpr int kOverfitSteps = 2000;
constexpr double kOverfitSeconds = 1800.0;
constexpr double kTwoStageGapDb = 0.3;

// Pre-training experiment shared by the benefit, two-stage and length criteria.
// Deraining from the identity map sits on a plateau for about 150 steps at this
// learning rate; 600 steps leaves every variant well past it.
struct ExperimentSetup {
  int corpus_images = 200;
  int image_size = 64;
  int train_pairs = 32;
  int test_pairs = 16;
  int pretrain_epochs = 10;  // K
  int pretrain_batch = 8;
  double pretrain_lr = 1e-3;
  std::int64_t finetune_steps = 600;
  int finetune_batch = 4;
  double finetune_lr = 2e-3;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

Tensor32 random_image(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> values(static_cast<std::size_t>(shape_numel(shape)));
  for (float& v : values) v = dist(rng);
  return Tensor32(std::move(shape), std::move(values));
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---- 1: gradient suite ----------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  GradSuiteOptions options;
  options.samples = 5;
  const GradSuiteReport report = run_gradient_suite(ModelConfig::nano(), options);
  const double secs = seconds_since(t0);
  std::string worst;
  double worst_err = -1.0;
  for (const auto& c : report.cases) {
    if (c.samples < 5) return {false, c.name + " ran fewer than 5 samples"};
    if (c.report.max_rel_err > worst_err) worst_err = c.report.max_rel_err, worst = c.name;
  }
  const bool pass = report.pass && report.max_rel_err <= kGradTol && secs < kGradSeconds;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu cases x 5 inputs, max rel err %.2e (%s) <= %.0e, %.0f s < %.0f s",
                report.cases.size(), report.max_rel_err, worst.c_str(), kGradTol, secs, kGradSeconds);
  return {pass, buf};
}

// ---- 2: padded inference equivalence ----------------------------------------

Outcome padded_equivalence() {
  const ModelConfig config = ModelConfig::toy();
  const auto params = init_params<float>(config, {2024, false});
  bool pass = true;
  std::string detail;
  for (auto [h, w] : {std::pair{16, 16}, std::pair{17, 23}, std::pair{100, 100}, std::pair{128, 128}}) {
    const Tensor32 image = random_image({1, 3, h, w}, static_cast<std::uint64_t>(h * 1000 + w));
    const double diff = max_abs_diff(infer_full_image(image, params, config), infer_input_padded(image, params, config));
    pass = pass && diff <= kEquivTol;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%dx%d %.1e, ", h, w, diff);
    detail += buf;
  }
  const PadPlan plan = plan_padding(16, 16, config);
  const std::array<int, kLevels> expected{16, 8, 8, 8, 1};
  std::string dims;
  for (int l = 0; l < kLevels; ++l) {
    const StageDims& d = plan.level(l);
    pass = pass && d.padded_h == expected[l] && d.padded_w == expected[l];
    dims += std::to_string(d.padded_h) + "x" + std::to_string(d.padded_w) + (l + 1 < kLevels ? " " : "");
  }
  return {pass, "max abs diff " + detail + "tol 1e-05; 16x16 stages " + dims};
}

// ---- 3: compute accounting ----------------------------------------------------

Outcome compute_accounting() {
  const ModelConfig nano = ModelConfig::nano();
  const MacReport small = count_macs(nano, 16, 16);
  const auto params = init_params<float>(nano, {3, false});
  const Tensor32 image = random_image({1, 3, 64, 64}, 3);
  MacTally tally;
  model_forward(image, params, nano);
  const std::int64_t counted = tally.total();
  const std::int64_t closed = count_plan_macs(nano, plan_padding(64, 64, nano)).total();
  const bool pass = small.padded.total() < small.baseline.total() && counted == closed;
  char buf[256];
  std::snprintf(buf, sizeof buf, "16x16 feature %lld < input %lld MACs; nano 64x64 instrumented %lld == closed form %lld",
                static_cast<long long>(small.padded.total()), static_cast<long long>(small.baseline.total()),
                static_cast<long long>(counted), static_cast<long long>(closed));
  return {pass, buf};
}

// ---- 4: residual identity -----------------------------------------------------

Outcome residual_identity() {
  bool identity = true;
  for (const ModelConfig& config : {ModelConfig::nano(), ModelConfig::toy()}) {
    const auto params = init_params<float>(config, {4});
    for (auto [h, w] : {std::pair{64, 64}, std::pair{37, 50}}) {
      const Tensor32 image = random_image({2, 3, h, w}, 40);
      const Tensor32 out = model_forward(image, params, config).restored;
      identity = identity && std::equal(out.data().begin(), out.data().end(), image.data().begin());
    }
  }
  const Tensor32 x = random_image({1, 3, 8, 8}, 41);
  const double c32 = charbonnier(x, x).item();
  const Tensor64 y(Shape{2, 5}, 0.25);
  const double c64 = charbonnier(y, y).item();
  const bool pass = identity && c32 == static_cast<double>(1e-3f) && c64 == 1e-3;
  char buf[160];
  std::snprintf(buf, sizeof buf, "fresh nano/toy forward %s input; Charbonnier at zero residual %.17g (f64), %.9g (f32)",
                identity ? "bit-equals" : "differs from", c64, c32);
  return {pass, buf};
}

// ---- 5: masking statistics ----------------------------------------------------

Outcome masking_statistics() {
  constexpr int kMasks = 10000, kGrid = 12, kPatch = 16;
  const int expected = static_cast<int>(std::lround(0.75 * kGrid * kGrid));
  std::mt19937_64 rng(5);
  std::vector<int> hits(kGrid * kGrid, 0);
  bool exact = true;
  for (int i = 0; i < kMasks; ++i) {
    const MaskSpec m = sample_mask(kGrid * kPatch, kGrid * kPatch, 0.75, kPatch, rng);
    int count = 0;
    for (std::size_t p = 0; p < m.grid.size(); ++p) {
      count += m.grid[p];
      hits[p] += m.grid[p];
    }
    exact = exact && count == expected && m.grid_h == kGrid && m.grid_w == kGrid;
  }
  double lo = 1.0, hi = 0.0;
  for (int h : hits) {
    lo = std::min(lo, h / static_cast<double>(kMasks));
    hi = std::max(hi, h / static_cast<double>(kMasks));
  }
  const bool pass = exact && expected == 108 && lo >= kMaskFreqLo && hi <= kMaskFreqHi;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d masks, every one with %s%d masked patches; per-patch frequency in [%.4f, %.4f]",
                kMasks, exact ? "" : "NOT ", expected, lo, hi);
  return {pass, buf};
}

// ---- 6: overfit smoke test ----------------------------------------------------

Outcome overfit_smoke() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::vector<ImagePair> pairs;
  for (int i = 0; i < 8; ++i) {
    ImageBuffer clean = synth_scene(64, 64, rng);
    ImageBuffer noisy = degrade_awgn(clean, 25.0, rng);
    pairs.push_back({std::move(noisy), std::move(clean)});
  }
  const ModelConfig config = ModelConfig::toy();
  auto params = init_params<float>(config, {1});
  OptimState<float> opt(params, {});
  FinetuneConfig ft;
  ft.crop = 64;
  ft.batch = 4;
  ft.steps = kOverfitSteps;
  ft.lr = 1e-3;
  ft.lr_min = 1e-6;
  ft.seed = 1;
  ft.augment = {false, false, false, false};
  run_finetune(pairs, params, config, opt, ft);
  double total = 0.0, input = 0.0;
  for (const auto& p : pairs) {
    const ImageBuffer restored = from_batch(restore(to_batch(std::span(&p.degraded, 1)), params, config), 0);
    total += psnr(restored, p.clean);
    input += psnr(p.degraded, p.clean);
  }
  const double train_psnr = total / 8.0, secs = seconds_since(t0);
  const bool pass = train_psnr >= kOverfitPsnrDb && secs < kOverfitSeconds;
  char buf[200];
  std::snprintf(buf, sizeof buf, "toy, 8 crops 64x64 sigma 25, %d steps: train PSNR %.2f dB >= %.1f (input %.2f), %.0f s < %.0f s",
                kOverfitSteps, train_psnr, kOverfitPsnrDb, input / 8.0, secs, kOverfitSeconds);
  return {pass, buf};
}

// ---- 7-9: pre-training experiment ---------------------------------------------

enum class Variant { kScratch, kTwoStageK, kOneStageK, kTwoStage2K };

class PretrainingExperiment {
 public:
  explicit PretrainingExperiment(ExperimentSetup setup) : s_(std::move(setup)), config_(ModelConfig::nano()) {
    std::mt19937_64 corpus_rng(1000);
    for (int i = 0; i < s_.corpus_images; ++i) corpus_.push_back(synth_scene(s_.image_size, s_.image_size, corpus_rng));
    std::mt19937_64 task_rng(2000);
    auto pair = [&] {
      ImageBuffer clean = synth_scene(s_.image_size, s_.image_size, task_rng);
      ImageBuffer rainy = degrade_rain(clean, {}, task_rng);
      return ImagePair{std::move(rainy), std::move(clean)};
    };
    for (int i = 0; i < s_.train_pairs; ++i) train_.push_back(pair());
    for (int i = 0; i < s_.test_pairs; ++i) test_.push_back(pair());
  }

  /// Mean held-out PSNR over the seeds, computed on first use.
  double mean_psnr(Variant v) {
    auto& slot = cache_[static_cast<int>(v)];
    if (!slot) {
      std::vector<double> per_seed;
      double sum = 0.0;
      for (std::uint64_t seed : s_.seeds) {
        per_seed.push_back(run(v, seed));
        sum += per_seed.back();
      }
      slot = sum / static_cast<double>(s_.seeds.size());
      seeds_[static_cast<int>(v)] = per_seed;
    }
    return *slot;
  }

  std::string per_seed(Variant v) {
    mean_psnr(v);
    std::string out;
    for (double p : seeds_[static_cast<int>(v)]) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%s%.2f", out.empty() ? "" : "/", p);
      out += buf;
    }
    return out;
  }

  const ExperimentSetup& setup() const { return s_; }

 private:
  double run(Variant v, std::uint64_t seed) {
    ParamStore<float> params = init_params<float>(config_, {seed});
    if (v != Variant::kScratch) {
      const int epochs = v == Variant::kTwoStage2K ? 2 * s_.pretrain_epochs : s_.pretrain_epochs;
      const double split = v == Variant::kOneStageK ? 0.0 : 0.5;
      ParamStore<float> pre = init_params<float>(config_, {seed});
      add_pretrain_params(pre, config_, FillMode::kZero, seed + 100);
      PretrainConfig pc;
      pc.epochs = epochs;
      pc.stage_split = split;
      pc.batch = s_.pretrain_batch;
      pc.crop = s_.image_size;
      pc.lr = s_.pretrain_lr;
      pc.seed = seed;
      run_pretraining(corpus_, pre, config_, pc);
      Archive archive;
      add_params(archive, pre);
      load_pretrained(archive, params);
    }
    OptimState<float> opt(params, {});
    FinetuneConfig ft;
    ft.crop = s_.image_size;
    ft.batch = s_.finetune_batch;
    ft.steps = s_.finetune_steps;
    ft.lr = s_.finetune_lr;
    ft.seed = seed;
    run_finetune(train_, params, config_, opt, ft);
    double total = 0.0;
    for (const auto& p : test_)
      total += psnr(from_batch(restore(to_batch(std::span(&p.degraded, 1)), params, config_), 0), p.clean);
    return total / static_cast<double>(test_.size());
  }

  ExperimentSetup s_;
  ModelConfig config_;
  std::vector<ImageBuffer> corpus_;
  std::vector<ImagePair> train_, test_;
  std::array<std::optional<double>, 4> cache_;
  std::array<std::vector<double>, 4> seeds_;
};

PretrainingExperiment& experiment() {
  static PretrainingExperiment e{ExperimentSetup{}};
  return e;
}

Outcome pretraining_benefit() {
  auto& e = experiment();
  const double scratch = e.mean_psnr(Variant::kScratch), pre = e.mean_psnr(Variant::kTwoStageK);
  char buf[256];
  std::snprintf(buf, sizeof buf, "held-out deraining PSNR, 3 seeds: pre-trained %.3f (%s) >= scratch %.3f (%s)", pre,
                e.per_seed(Variant::kTwoStageK).c_str(), scratch, e.per_seed(Variant::kScratch).c_str());
  return {pre >= scratch, buf};
}

Outcome two_stage_equivalence() {
  auto& e = experiment();
  const double two = e.mean_psnr(Variant::kTwoStageK), one = e.mean_psnr(Variant::kOneStageK);
  char buf[256];
  std::snprintf(buf, sizeof buf, "two-stage %.3f (%s) vs one-stage %.3f (%s): |gap| %.3f dB <= %.1f", two,
                e.per_seed(Variant::kTwoStageK).c_str(), one, e.per_seed(Variant::kOneStageK).c_str(),
                std::abs(two - one), kTwoStageGapDb);
  return {std::abs(two - one) <= kTwoStageGapDb, buf};
}

Outcome pretraining_length() {
  auto& e = experiment();
  const int k = e.setup().pretrain_epochs;
  const double p0 = e.mean_psnr(Variant::kScratch), pk = e.mean_psnr(Variant::kTwoStageK),
               p2k = e.mean_psnr(Variant::kTwoStage2K);
  char buf[256];
  std::snprintf(buf, sizeof buf, "3-seed mean PSNR at 0 / %d / %d epochs: %.3f <= %.3f <= %.3f (%s)", k, 2 * k, p0, pk,
                p2k, e.per_seed(Variant::kTwoStage2K).c_str());
  return {p0 <= pk && pk <= p2k, buf};
}

// ---- 10: metrics oracles --------------------------------------------------------

Outcome metrics_oracles() {
  std::mt19937_64 rng(10);
  const ImageBuffer scene = synth_scene(48, 40, rng);
  const double self = ssim(scene, scene);
  ImageBuffer shifted = scene;
  for (float& v : shifted.pixels) v += 1.0f / 255.0f;
  const double offset_db = psnr(scene, shifted);
  const double expected_db = 20.0 * std::log10(255.0);

  const Tensor32 x = random_image({2, 3, 8, 12}, 11);
  const Tensor32 round_trip = pixel_shuffle(pixel_unshuffle(x, 4), 4);
  const bool shuffle = std::equal(x.data().begin(), x.data().end(), round_trip.data().begin());

  const ModelConfig config = ModelConfig::nano();
  const auto params = init_params<float>(config, {12, false});
  const auto path = std::filesystem::temp_directory_path() / "csformer_acceptance_model.cskpt";
  save_model(path, params, config);
  const ModelConfig loaded_config = load_model_config(path);
  auto loaded = init_params<float>(loaded_config, {13, false});
  load_params(Archive::load(path), loaded);
  std::filesystem::remove(path);
  std::filesystem::remove(config_sidecar(path));
  const Tensor32 image = random_image({1, 3, 30, 26}, 14);
  const Tensor32 a = model_forward(image, params, config).restored;
  const Tensor32 b = model_forward(image, loaded, loaded_config).restored;
  const bool checkpoint = loaded_config == config && std::equal(a.data().begin(), a.data().end(), b.data().begin());

  const bool pass = self == 1.0 && std::abs(offset_db - 48.13) <= 0.01 &&
                    std::abs(offset_db - expected_db) <= 1e-3 && shuffle && checkpoint;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "ssim(x,x) %.12g; 1/255 offset %.4f dB (48.13 +- 0.01); shuffle round trip %s; checkpoint forward %s",
                self, offset_db, shuffle ? "exact" : "differs", checkpoint ? "bit-identical" : "differs");
  return {pass, buf};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Criterion numbers to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "gradient suite", gradient_suite},
      {2, "padded inference equivalence", padded_equivalence},
      {3, "compute accounting", compute_accounting},
      {4, "residual identity", residual_identity},
      {5, "masking statistics", masking_statistics},
      {6, "overfit smoke test", overfit_smoke},
      {7, "pre-training benefit", pretraining_benefit},
      {8, "two-stage vs one-stage", two_stage_equivalence},
      {9, "pre-training length", pretraining_length},
      {10, "metrics oracles", metrics_oracles},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("[%s] %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
