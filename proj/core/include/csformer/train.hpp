#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "csformer/checkpoint.hpp"
#include "csformer/config.hpp"
#include "csformer/image.hpp"
#include "csformer/params.hpp"

namespace csformer {

/// mean over elements of sqrt(r² + eps²), evaluated as eps·sqrt(1 + (r/eps)²)
/// so that a zero residual yields eps exactly.
template <typename T>
Tensor<T> charbonnier(const Tensor<T>& pred, const Tensor<T>& target, double eps = 1e-3);

/// Mean squared error, optionally restricted to elements where `weights` is
/// nonzero and normalised by the weight sum.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>* weights = nullptr);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
struct OptimState {
  AdamWConfig config;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;

  OptimState() = default;
  OptimState(const ParamStore<T>& params, AdamWConfig config);
};

/// One decoupled-weight-decay Adam update over every parameter that holds a
/// gradient; the others are left untouched. Throws when no gradient exists.
template <typename T>
void adamw_step(ParamStore<T>& params, OptimState<T>& state, double lr);

struct Schedule {
  double lr_init = 2e-4;
  double lr_min = 1e-6;
  std::int64_t total_steps = 1;
};

/// lr_min + ½(lr_init − lr_min)(1 + cos(π·step/total)).
double cosine_lr(std::int64_t step, const Schedule& schedule);

struct AugmentConfig {
  bool hflip = true;
  bool vflip = true;
  bool rot90 = true;
  bool mixup = false;
  double mixup_alpha = 1.2;
};

/// Horizontal flip of every image in [N,C,H,W].
Tensor32 flip_horizontal(const Tensor32& x);
Tensor32 flip_vertical(const Tensor32& x);
/// Counter-clockwise quarter turn [N,C,H,W] -> [N,C,W,H].
Tensor32 rotate90(const Tensor32& x);
/// λ·a + (1 − λ)·b.
Tensor32 blend(const Tensor32& a, const Tensor32& b, float lambda);
double sample_beta(double alpha, std::mt19937_64& rng);

struct PairBatch {
  Tensor32 degraded;
  Tensor32 clean;
};

/// Random flips and rotation applied identically to both halves, then MixUp
/// with a shuffled copy of the batch under one Beta(α, α) weight.
PairBatch augment_batch(const PairBatch& batch, const AugmentConfig& config, std::mt19937_64& rng);

struct ImagePair {
  ImageBuffer degraded;
  ImageBuffer clean;
};

/// Pairs from two directories holding PNGs with matching file names. Throws
/// IoError when a degraded image has no clean counterpart or the shapes differ.
std::vector<ImagePair> load_pairs(const std::filesystem::path& degraded_dir, const std::filesystem::path& clean_dir);

/// `batch` random crops of `crop` pixels from randomly chosen pairs.
PairBatch sample_crops(std::span<const ImagePair> pairs, int batch, int crop, std::mt19937_64& rng);

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_psnr = 0.0;
};

/// One Charbonnier step on the restoration model at the learning rate the
/// schedule gives for the optimizer's current step.
StepRecord finetune_step(const PairBatch& batch, ParamStore<float>& params, const ModelConfig& config,
                         OptimState<float>& opt, const Schedule& schedule);

struct FinetuneConfig {
  std::string task = "denoise";
  int crop = 64;
  int batch = 4;
  std::int64_t steps = 1000;
  double lr = 2e-4;
  double lr_min = 1e-6;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  /// Uses every pair at full size as the batch instead of random crops.
  bool full_batch = false;
};

/// Runs the fine-tuning loop from the optimizer's current step. `on_step`
/// receives every record; returning false stops early.
std::vector<StepRecord> run_finetune(std::span<const ImagePair> pairs, ParamStore<float>& params,
                                     const ModelConfig& config, OptimState<float>& opt, const FinetuneConfig& ft,
                                     const std::function<bool(const StepRecord&)>& on_step = {});

/// Parameters, AdamW moments and the step counter in one archive plus the
/// model config sidecar.
void save_train_state(const std::filesystem::path& path, const ParamStore<float>& params,
                      const OptimState<float>& opt, const ModelConfig& config);
/// Restores a state written by save_train_state into matching stores.
void load_train_state(const std::filesystem::path& path, ParamStore<float>& params, OptimState<float>& opt);

/// Restoration of a whole batch in inference mode, clipped to no range.
Tensor32 restore(const Tensor32& degraded, const ParamStore<float>& params, const ModelConfig& config);

/// Mean PSNR over the images of two batches.
double batch_psnr(const Tensor32& a, const Tensor32& b);

}  // namespace csformer
