#pragma once

#include <array>
#include <cstdint>

#include "csformer/config.hpp"
#include "csformer/mac_counter.hpp"
#include "csformer/padding.hpp"
#include "csformer/params.hpp"

namespace csformer {

/// MACs of a convolution producing a cout × hout × wout map.
std::int64_t conv_macs(std::int64_t cout, std::int64_t cin, std::int64_t groups, std::int64_t kh, std::int64_t kw,
                       std::int64_t hout, std::int64_t wout);

/// Multiply-accumulate totals of one forward pass for a single image.
/// Element-wise work (normalisation, activations, softmax) is not counted.
struct MacBreakdown {
  MacTotals classes{};
  std::array<std::int64_t, kLevels> per_level{};

  std::int64_t total() const;
  std::int64_t conv() const;
  /// qkv, logits, values and output projection together.
  std::int64_t attention() const;
};

struct MacReport {
  MacBreakdown padded;    // feature padding
  MacBreakdown baseline;  // input padded to a multiple of window · 2⁴
};

MacBreakdown count_plan_macs(const ModelConfig& config, const PadPlan& plan);
MacReport count_macs(const ModelConfig& config, int h, int w);

enum class Baseline {
  kMasked,    // padded input, pad region masked and zeroed like the feature path
  kUnmasked,  // padded input treated as content everywhere
};

/// Input padding plan whose every level counts as valid content.
PadPlan plan_unmasked_input_padding(int h, int w, const ModelConfig& config);

/// Restores an image of any size with per-level feature padding.
template <typename T>
Tensor<T> infer_full_image(const Tensor<T>& image, const ParamStore<T>& params, const ModelConfig& config);

/// Restores an image by padding the input to a multiple of window · 2⁴ and
/// cropping the result.
template <typename T>
Tensor<T> infer_input_padded(const Tensor<T>& image, const ParamStore<T>& params, const ModelConfig& config,
                             Baseline mode = Baseline::kMasked);

}  // namespace csformer
