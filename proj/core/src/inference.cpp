#include "csformer/inference.hpp"

#include <numeric>

#include "csformer/model.hpp"

namespace csformer {
namespace {

struct Counter {
  const ModelConfig& config;
  const PadPlan& plan;
  MacBreakdown out;

  void add(MacClass c, int level, std::int64_t macs) {
    out.classes[static_cast<std::size_t>(c)] += macs;
    out.per_level[static_cast<std::size_t>(level)] += macs;
  }

  std::int64_t area(int level) const {
    const StageDims& d = plan.level(level);
    return static_cast<std::int64_t>(d.padded_h) * d.padded_w;
  }

  void block(int level, int block_index, int stage) {
    const std::int64_t d = config.width(level), hidden = config.gcffn_hidden(level), hw = area(level);
    const std::int64_t tokens = block_attn_kind(config, stage, block_index) == AttnKind::kGlobal
                                    ? hw
                                    : static_cast<std::int64_t>(plan.window) * plan.window;
    add(MacClass::kConv, level, (d / 2) * (d / 2) + (d / 2) * d * hw);
    add(MacClass::kAttnQkv, level, 3 * d * d * hw);
    add(MacClass::kAttnLogits, level, hw * tokens * d);
    add(MacClass::kAttnValues, level, hw * tokens * d);
    add(MacClass::kAttnProj, level, d * d * hw);
    add(MacClass::kGcffn, level, (3 * hidden * d + 2 * hidden * 9) * hw);
  }
};

}  // namespace

std::int64_t conv_macs(std::int64_t cout, std::int64_t cin, std::int64_t groups, std::int64_t kh, std::int64_t kw,
                       std::int64_t hout, std::int64_t wout) {
  return cout * (cin / groups) * kh * kw * hout * wout;
}

std::int64_t MacBreakdown::total() const { return std::accumulate(classes.begin(), classes.end(), std::int64_t{0}); }

std::int64_t MacBreakdown::conv() const {
  return classes[static_cast<std::size_t>(MacClass::kConv)] + classes[static_cast<std::size_t>(MacClass::kGcffn)] +
         classes[static_cast<std::size_t>(MacClass::kResampling)];
}

std::int64_t MacBreakdown::attention() const {
  std::int64_t sum = 0;
  for (MacClass c : {MacClass::kAttnQkv, MacClass::kAttnLogits, MacClass::kAttnValues, MacClass::kAttnProj}) {
    sum += classes[static_cast<std::size_t>(c)];
  }
  return sum;
}

MacBreakdown count_plan_macs(const ModelConfig& config, const PadPlan& plan) {
  config.validate();
  Counter k{config, plan, {}};
  const std::int64_t c0 = config.base_channels;
  const StageDims& top = plan.level(0);
  k.add(MacClass::kConv, 0, conv_macs(c0, config.in_channels, 1, 3, 3, top.padded_h, top.padded_w));
  for (int stage = 0; stage < kStages; ++stage) {
    const int level = ModelConfig::stage_level(stage);
    const std::int64_t c = config.width(level);
    if (stage > 4) {
      const std::int64_t below = config.width(level + 1);
      k.add(MacClass::kResampling, level + 1, 2 * below * below * k.area(level + 1));
      k.add(MacClass::kConv, level, 2 * c * c * k.area(level));
    }
    for (int b = 0; b < config.blocks_per_stage[static_cast<std::size_t>(stage)]; ++b) k.block(level, b, stage);
    if (stage < 4) k.add(MacClass::kResampling, level + 1, 4 * c * 2 * c * k.area(level + 1));
  }
  k.add(MacClass::kConv, 0, conv_macs(config.out_channels, c0, 1, 3, 3, top.padded_h, top.padded_w));
  return k.out;
}

MacReport count_macs(const ModelConfig& config, int h, int w) {
  return {count_plan_macs(config, plan_padding(h, w, config)), count_plan_macs(config, plan_input_padding(h, w, config))};
}

PadPlan plan_unmasked_input_padding(int h, int w, const ModelConfig& config) {
  PadPlan plan = plan_input_padding(h, w, config);
  for (StageDims& d : plan.levels) {
    d.valid_h = d.padded_h;
    d.valid_w = d.padded_w;
  }
  return plan;
}

template <typename T>
Tensor<T> infer_full_image(const Tensor<T>& image, const ParamStore<T>& params, const ModelConfig& config) {
  return model_forward(image, params, config).restored;
}

template <typename T>
Tensor<T> infer_input_padded(const Tensor<T>& image, const ParamStore<T>& params, const ModelConfig& config,
                             Baseline mode) {
  if (image.rank() != 4) throw ShapeError("expected an image [N,C,H,W], got " + shape_to_string(image.shape()));
  const int h = image.dim(2), w = image.dim(3);
  if (mode == Baseline::kMasked) {
    const PadPlan plan = plan_input_padding(h, w, config);
    return model_forward(image, params, config, &plan).restored;
  }
  PadPlan plan = plan_unmasked_input_padding(h, w, config);
  plan.input_h = plan.level(0).padded_h;
  plan.input_w = plan.level(0).padded_w;
  const Tensor<T> padded = resize_spatial(image, plan.input_h, plan.input_w);
  return resize_spatial(model_forward(padded, params, config, &plan).restored, h, w);
}

template Tensor<float> infer_full_image(const Tensor<float>&, const ParamStore<float>&, const ModelConfig&);
template Tensor<double> infer_full_image(const Tensor<double>&, const ParamStore<double>&, const ModelConfig&);
template Tensor<float> infer_input_padded(const Tensor<float>&, const ParamStore<float>&, const ModelConfig&,
                                          Baseline);
template Tensor<double> infer_input_padded(const Tensor<double>&, const ParamStore<double>&, const ModelConfig&,
                                           Baseline);

}  // namespace csformer
