#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "csformer/config.hpp"
#include "csformer/ops.hpp"
#include "csformer/padding.hpp"
#include "csformer/params.hpp"

namespace csformer {

enum class AttnKind { kWindow, kShifted, kGlobal };

/// Attention kind of block `block` within `stage`.
AttnKind block_attn_kind(const ModelConfig& config, int stage, int block);

/// Masks and extents for one depth level of a planned forward pass. An empty
/// mask means no pair needs excluding.
struct LevelContext {
  StageDims dims;
  int window = 8;
  std::optional<AttentionMask> window_mask;
  std::optional<AttentionMask> shifted_mask;
  std::optional<AttentionMask> global_mask;
};

/// Everything a forward pass derives from a PadPlan, built once per plan.
struct ForwardContext {
  PadPlan plan;
  std::array<LevelContext, kLevels> levels;

  ForwardContext(const PadPlan& plan, const ModelConfig& config);
};

template <typename T>
struct EncoderOutput {
  Tensor<T> latent;               // bottleneck features at level 4
  std::array<Tensor<T>, 4> skips;  // encoder outputs of levels 0-3
};

template <typename T>
struct ForwardResult {
  Tensor<T> restored;
  Tensor<T> residual;
  Tensor<T> latent;
};

// ---- components -----------------------------------------------------------

/// 3×3 same-padding convolution from the image to C feature channels.
template <typename T>
Tensor<T> shallow_embed(const Tensor<T>& image, const ParamStore<T>& params);

/// Simple gate, then X * MLP(Avg(X)), then a point-wise conv restoring d
/// channels. `valid` restricts the pooling to the original region.
template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix,
                            std::optional<std::pair<int, int>> valid = std::nullopt);

/// Multi-head attention inside window × window tiles after a cyclic roll by
/// -shift. Mask group g applies to tile g (row-major tile order).
template <typename T>
Tensor<T> window_msa(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix, int heads,
                     int window, int shift, const AttentionMask* mask = nullptr);

/// Multi-head attention over every position of the map.
template <typename T>
Tensor<T> global_msa(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix, int heads,
                     const AttentionMask* mask = nullptr);

/// Wp3(GELU(Wd1(Wp1 x)) ⊙ Wd2(Wp2 x)); `dims` zeroes padding ahead of each
/// depth-wise conv.
template <typename T>
Tensor<T> gcffn(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix,
                const StageDims* dims = nullptr);

template <typename T>
Tensor<T> csformer_block(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix,
                         const ModelConfig& config, int level, AttnKind kind, const LevelContext& ctx);

/// pixel_unshuffle(2), crop/pad to the next level's extent, 1×1 conv 4c→2c.
template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const ParamStore<T>& params, int level, const StageDims& next);

/// 1×1 conv c→2c, pixel_shuffle(2), crop/pad to the target level's extent.
template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const ParamStore<T>& params, int level, const StageDims& target);

/// Channel concat (decoder first) followed by a 1×1 conv 2c→c.
template <typename T>
Tensor<T> skip_fuse(const Tensor<T>& dec, const Tensor<T>& enc, const ParamStore<T>& params, int level);

// ---- full network ---------------------------------------------------------

template <typename T>
EncoderOutput<T> encode(const Tensor<T>& image, const ParamStore<T>& params, const ModelConfig& config,
                        const ForwardContext& ctx);

/// Decoder from the latent to the residual map at the padded level-0 extent.
template <typename T>
Tensor<T> decode(const EncoderOutput<T>& enc, const ParamStore<T>& params, const ModelConfig& config,
                 const ForwardContext& ctx);

/// Runs the whole network. Without a plan, feature padding for the image size
/// is planned automatically.
template <typename T>
ForwardResult<T> model_forward(const Tensor<T>& image, const ParamStore<T>& params, const ModelConfig& config,
                               const PadPlan* plan = nullptr);

}  // namespace csformer
