#include "csformer/maeip.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "csformer/error.hpp"
#include "csformer/mac_counter.hpp"
#include "csformer/model.hpp"
#include "csformer/ops.hpp"

namespace csformer {

int MaskSpec::masked_count() const {
  return static_cast<int>(std::count(grid.begin(), grid.end(), std::uint8_t{1}));
}

int masked_patch_count(int total, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mask ratio must lie in [0, 1]");
  return static_cast<int>(std::lround(ratio * total));
}

MaskSpec sample_mask(int h, int w, double ratio, int patch, std::mt19937_64& rng) {
  if (patch < 1 || h < patch || w < patch || h % patch != 0 || w % patch != 0) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible into " +
                     std::to_string(patch) + "-pixel patches");
  }
  MaskSpec spec;
  spec.patch_size = patch;
  spec.ratio = ratio;
  spec.grid_h = h / patch;
  spec.grid_w = w / patch;
  const int total = spec.total(), masked = masked_patch_count(total, ratio);
  std::vector<int> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first `masked` slots form a uniform subset.
  for (int i = 0; i < masked; ++i) {
    std::uniform_int_distribution<int> pick(i, total - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
  }
  spec.grid.assign(static_cast<std::size_t>(total), 0);
  for (int i = 0; i < masked; ++i) spec.grid[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
  return spec;
}

Tensor32 mask_map(std::span<const MaskSpec> specs, int channels) {
  if (specs.empty()) throw ShapeError("mask_map needs at least one mask");
  const MaskSpec& first = specs.front();
  const int h = first.grid_h * first.patch_size, w = first.grid_w * first.patch_size;
  Tensor32 out(Shape{static_cast<int>(specs.size()), channels, h, w});
  auto dst = out.mutable_data();
  std::size_t k = 0;
  for (const MaskSpec& s : specs) {
    if (s.grid_h * s.patch_size != h || s.grid_w * s.patch_size != w) throw ShapeError("masks differ in extent");
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) dst[k++] = s.masked(y / s.patch_size, x / s.patch_size) ? 1.0f : 0.0f;
  }
  return out;
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& image, std::span<const MaskSpec> specs, const Tensor<T>* fill) {
  if (image.rank() != 4 || static_cast<std::size_t>(image.dim(0)) != specs.size()) {
    throw ShapeError("apply_mask needs one mask per image, got " + shape_to_string(image.shape()));
  }
  const int n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  for (const MaskSpec& s : specs)
    if (s.grid_h * s.patch_size != h || s.grid_w * s.patch_size != w) throw ShapeError("mask does not match image");
  if (fill && fill->numel() != c) throw ShapeError("fill needs one value per channel");
  std::vector<std::uint8_t> masked(static_cast<std::size_t>(n) * h * w);
  for (int b = 0; b < n; ++b) {
    const MaskSpec& s = specs[static_cast<std::size_t>(b)];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        masked[(static_cast<std::size_t>(b) * h + y) * w + x] = s.masked(y / s.patch_size, x / s.patch_size);
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out(image.shape());
  auto dst = out.mutable_data();
  auto src = image.data();
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const T value = fill ? fill->data()[static_cast<std::size_t>(ch)] : T{0};
      const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * plane;
      const std::uint8_t* m = masked.data() + static_cast<std::size_t>(b) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[base + i] = m[i] ? value : src[base + i];
    }
  const Tensor<T> fill_tensor = fill ? *fill : Tensor<T>{};
  if (auto* tape = recording_tape({&image, fill ? &fill_tensor : nullptr})) {
    tape->record(out, [image, fill_tensor, masked = std::move(masked), n, c, plane](const Tensor<T>& out) {
      auto go = out.grad();
      if (image.requires_grad()) {
        auto g = image.grad_buffer();
        for (int b = 0; b < n; ++b)
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * plane;
            const std::uint8_t* m = masked.data() + static_cast<std::size_t>(b) * plane;
            for (std::size_t i = 0; i < plane; ++i)
              if (!m[i]) g[base + i] += go[base + i];
          }
      }
      if (fill_tensor.defined() && fill_tensor.requires_grad()) {
        auto g = fill_tensor.grad_buffer();
        for (int b = 0; b < n; ++b)
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * plane;
            const std::uint8_t* m = masked.data() + static_cast<std::size_t>(b) * plane;
            for (std::size_t i = 0; i < plane; ++i)
              if (m[i]) g[static_cast<std::size_t>(ch)] += go[base + i];
          }
      }
    });
  }
  return out;
}

void add_pretrain_params(ParamStore<float>& params, const ModelConfig& config, FillMode fill, std::uint64_t seed) {
  const int latent = config.width(kLevels - 1), out = 256 * config.in_channels;
  std::mt19937_64 rng(seed ^ 0x4ead5eedULL);
  const double bound = 1.0 / std::sqrt(static_cast<double>(latent));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  std::vector<float> weight(static_cast<std::size_t>(out) * latent);
  for (float& v : weight) v = static_cast<float>(uniform(rng));
  params.add("head.weight", Tensor32::parameter({out, latent, 1, 1}, std::move(weight)));
  params.add("head.bias", Tensor32::parameter({out}, std::vector<float>(static_cast<std::size_t>(out), 0.0f)));
  if (fill == FillMode::kLearnable) {
    params.add("mask_fill", Tensor32::parameter({config.in_channels},
                                                std::vector<float>(static_cast<std::size_t>(config.in_channels))));
  }
}

template <typename T>
Tensor<T> encoder_reconstruct(const Tensor<T>& latent, const ParamStore<T>& params) {
  const Tensor<T>& weight = params.at("head.weight");
  if (latent.rank() != 4 || latent.dim(1) != weight.dim(1)) {
    throw ShapeError("reconstruction head expects " + std::to_string(weight.dim(1)) + " latent channels, got " +
                     shape_to_string(latent.shape()));
  }
  MacClassScope scope(MacClass::kHead);
  return pixel_shuffle(conv2d(latent, weight, params.find("head.bias"), {1, 0, 1}), 16);
}

MaeipLosses maeip_losses(const Tensor32* pred_enc, const Tensor32* pred_dec, const Tensor32& clean,
                         const Tensor32& mask, PretrainStage stage, double lambda_dec) {
  MaeipLosses out;
  if (pred_enc) {
    double masked = 0.0;
    for (float v : mask.data()) masked += v;
    if (masked == 0.0) throw ShapeError("encoder loss requested with an empty mask");
    out.loss_enc = mse(*pred_enc, clean, &mask);
  }
  if (stage == PretrainStage::kEncoderOnly) {
    if (!pred_enc) throw ConfigError("the encoder-only stage needs an encoder prediction");
    out.total = out.loss_enc;
    return out;
  }
  if (!pred_dec) throw ConfigError("the joint stage needs a decoder prediction");
  out.loss_dec = mse(*pred_dec, clean);
  const Tensor32 weighted = scale(out.loss_dec, static_cast<float>(lambda_dec));
  out.total = pred_enc ? add(out.loss_enc, weighted) : weighted;
  return out;
}

PretrainRecord pretrain_step(const Tensor32& clean, std::span<const MaskSpec> masks, ParamStore<float>& params,
                             const ModelConfig& config, OptimState<float>& opt, PretrainStage stage,
                             const PretrainConfig& pc, double lr) {
  if (!config.pretrain_mode) throw ConfigError("pre-training needs pretrain_mode (no image skip)");
  PretrainRecord record;
  record.stage = stage;
  params.set_requires_grad(true);
  params.zero_grad();
  {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    const Tensor32 fill = params.find("mask_fill");
    const Tensor32 masked = apply_mask(clean, masks, fill.defined() ? &fill : nullptr);
    const Tensor32 mask = mask_map(masks, clean.dim(1));
    const bool want_enc = stage == PretrainStage::kEncoderOnly || pc.joint_encoder_loss;
    MaeipLosses losses;
    if (stage == PretrainStage::kEncoderOnly) {
      const ForwardContext ctx(plan_padding(clean.dim(2), clean.dim(3), config), config);
      const Tensor32 pred_enc = encoder_reconstruct(encode(masked, params, config, ctx).latent, params);
      losses = maeip_losses(&pred_enc, nullptr, clean, mask, stage, pc.lambda_dec);
    } else {
      const ForwardResult<float> fwd = model_forward(masked, params, config);
      const Tensor32 pred_enc = want_enc ? encoder_reconstruct(fwd.latent, params) : Tensor32{};
      losses = maeip_losses(want_enc ? &pred_enc : nullptr, &fwd.restored, clean, mask, stage, pc.lambda_dec);
    }
    tape.backward(losses.total);
    record.total = losses.total.item();
    if (losses.loss_enc.defined()) record.loss_enc = losses.loss_enc.item();
    if (losses.loss_dec.defined()) record.loss_dec = losses.loss_dec.item();
  }
  adamw_step(params, opt, lr);
  params.zero_grad();
  return record;
}

StagePlan two_stage_schedule(int total_epochs, double split) {
  if (total_epochs < 0) throw ConfigError("epoch count must be non-negative");
  if (!(split >= 0.0 && split < 1.0)) throw ConfigError("stage split must lie in [0, 1)");
  StagePlan plan;
  plan.encoder_epochs = static_cast<int>(std::lround(split * total_epochs));
  plan.joint_epochs = total_epochs - plan.encoder_epochs;
  return plan;
}

std::vector<EpochRecord> run_pretraining(std::span<const ImageBuffer> corpus, ParamStore<float>& params,
                                         const ModelConfig& config, const PretrainConfig& pc,
                                         const std::function<void(const EpochRecord&)>& on_epoch) {
  if (corpus.empty()) throw ConfigError("pre-training corpus is empty");
  if (pc.batch < 1 || pc.crop < 16 || pc.crop % 16 != 0) throw ConfigError("crop must be a positive multiple of 16");
  ModelConfig cfg = config;
  cfg.pretrain_mode = true;
  const StagePlan plan = two_stage_schedule(pc.epochs, pc.stage_split);
  const auto n = static_cast<int>(corpus.size());
  const int steps_per_epoch = (n + pc.batch - 1) / pc.batch;
  const Schedule schedule{pc.lr, pc.lr_min, std::max<std::int64_t>(1, std::int64_t{pc.epochs} * steps_per_epoch)};
  OptimState<float> opt(params, {0.9, 0.999, 1e-8, pc.weight_decay});
  std::vector<EpochRecord> log;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < plan.total(); ++epoch) {
    std::seed_seq seq{pc.seed, static_cast<std::uint64_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = plan.stage_for(epoch);
    for (int start = 0; start < n; start += pc.batch) {
      std::vector<ImageBuffer> crops;
      std::vector<MaskSpec> masks;
      for (int i = start; i < std::min(n, start + pc.batch); ++i) {
        const ImageBuffer& im = corpus[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        if (im.height < pc.crop || im.width < pc.crop) throw ShapeError("corpus image smaller than the crop");
        std::uniform_int_distribution<int> ys(0, im.height - pc.crop), xs(0, im.width - pc.crop);
        const int y = ys(rng), x = xs(rng);
        crops.push_back(crop(im, y, x, pc.crop, pc.crop));
        masks.push_back(sample_mask(pc.crop, pc.crop, pc.mask_ratio, pc.patch_size, rng));
      }
      const PretrainRecord r =
          pretrain_step(to_batch(crops), masks, params, cfg, opt, rec.stage, pc, cosine_lr(step, schedule));
      ++step;
      rec.loss_enc += r.loss_enc / steps_per_epoch;
      rec.loss_dec += r.loss_dec / steps_per_epoch;
    }
    log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return log;
}

LoadReport load_pretrained(const Archive& archive, ParamStore<float>& params, bool keep_output_conv) {
  LoadReport report = load_params(archive, params);
  if (!keep_output_conv)
    for (const char* name : {"output.weight", "output.bias"})
      if (params.contains(name))
        for (float& v : params.at(name).mutable_data()) v = 0.0f;
  return report;
}

template Tensor<float> apply_mask(const Tensor<float>&, std::span<const MaskSpec>, const Tensor<float>*);
template Tensor<double> apply_mask(const Tensor<double>&, std::span<const MaskSpec>, const Tensor<double>*);
template Tensor<float> encoder_reconstruct(const Tensor<float>&, const ParamStore<float>&);
template Tensor<double> encoder_reconstruct(const Tensor<double>&, const ParamStore<double>&);

}  // namespace csformer
