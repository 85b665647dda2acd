#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "csformer/checkpoint.hpp"
#include "csformer/config.hpp"
#include "csformer/image.hpp"
#include "csformer/params.hpp"
#include "csformer/train.hpp"

namespace csformer {

/// Random patch grid over one image; grid is row-major, 1 = masked.
struct MaskSpec {
  int patch_size = 16;
  double ratio = 0.75;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<std::uint8_t> grid;

  int total() const { return grid_h * grid_w; }
  int masked_count() const;
  bool masked(int gy, int gx) const { return grid[static_cast<std::size_t>(gy) * grid_w + gx] != 0; }
};

/// round(ratio · total), halves rounded away from zero.
int masked_patch_count(int total, double ratio);

/// Exactly masked_patch_count patches, drawn uniformly without replacement.
MaskSpec sample_mask(int h, int w, double ratio, int patch, std::mt19937_64& rng);

/// Per-pixel indicator [N, channels, H, W] of the masked patches.
Tensor32 mask_map(std::span<const MaskSpec> specs, int channels);

/// Replaces masked pixels by zero or, with `fill` ([C]), by a per-channel
/// value that receives gradients. Unmasked pixels pass through untouched.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& image, std::span<const MaskSpec> specs, const Tensor<T>* fill = nullptr);

enum class FillMode { kZero, kLearnable };

/// Adds the reconstruction head ("head.weight" [256·in, 16C, 1, 1] and
/// "head.bias") and, for a learnable fill, "mask_fill" [in].
void add_pretrain_params(ParamStore<float>& params, const ModelConfig& config, FillMode fill, std::uint64_t seed);

/// Linear map of every bottleneck token to a 16 × 16 pixel patch.
template <typename T>
Tensor<T> encoder_reconstruct(const Tensor<T>& latent, const ParamStore<T>& params);

enum class PretrainStage { kEncoderOnly, kJoint };

struct MaeipLosses {
  Tensor32 loss_enc;  // undefined when not computed
  Tensor32 loss_dec;  // undefined when not computed
  Tensor32 total;
};

/// Encoder loss: MSE over masked pixels. Decoder loss: MSE over all pixels.
/// encoder_only: total = loss_enc; joint: total = loss_enc + λ·loss_dec, or
/// λ·loss_dec when `pred_enc` is null.
MaeipLosses maeip_losses(const Tensor32* pred_enc, const Tensor32* pred_dec, const Tensor32& clean,
                         const Tensor32& mask, PretrainStage stage, double lambda_dec = 1.0);

struct PretrainConfig {
  int patch_size = 16;
  double mask_ratio = 0.75;
  int epochs = 10;
  double stage_split = 0.5;
  double lambda_dec = 1.0;
  FillMode fill_mode = FillMode::kZero;
  bool joint_encoder_loss = true;
  int batch = 8;
  int crop = 64;
  double lr = 1e-3;
  double lr_min = 1e-5;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct PretrainRecord {
  PretrainStage stage = PretrainStage::kEncoderOnly;
  double loss_enc = 0.0;
  double loss_dec = 0.0;
  double total = 0.0;
};

/// One MAEIP update. encoder_only never runs the decoder, so decoder
/// parameters receive no gradient and keep their values.
PretrainRecord pretrain_step(const Tensor32& clean, std::span<const MaskSpec> masks, ParamStore<float>& params,
                             const ModelConfig& config, OptimState<float>& opt, PretrainStage stage,
                             const PretrainConfig& pc, double lr);

struct StagePlan {
  int encoder_epochs = 0;
  int joint_epochs = 0;

  int total() const { return encoder_epochs + joint_epochs; }
  PretrainStage stage_for(int epoch) const {
    return epoch < encoder_epochs ? PretrainStage::kEncoderOnly : PretrainStage::kJoint;
  }
};

/// round(split · total) encoder-only epochs followed by joint epochs.
StagePlan two_stage_schedule(int total_epochs, double split);

struct EpochRecord {
  int epoch = 0;
  PretrainStage stage = PretrainStage::kEncoderOnly;
  double loss_enc = 0.0;
  double loss_dec = 0.0;
};

/// Pre-trains on random crops of the corpus. `params` must already hold the
/// pre-training parameters; the config's pretrain_mode is forced on.
/// `on_epoch` sees each epoch record after it completes.
std::vector<EpochRecord> run_pretraining(std::span<const ImageBuffer> corpus, ParamStore<float>& params,
                                         const ModelConfig& config, const PretrainConfig& pc,
                                         const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Initialises a restoration model from a pre-training archive. The
/// reconstruction head and mask fill are left unused. Unless
/// `keep_output_conv` is set, the output conv is zeroed again: the pre-trained
/// decoder emits whole images, and with the input skip restored a zero output
/// conv makes fine-tuning start from the identity map, as a fresh model does.
LoadReport load_pretrained(const Archive& archive, ParamStore<float>& params, bool keep_output_conv = false);

}  // namespace csformer
