#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "csformer/config.hpp"
#include "csformer/ops.hpp"

namespace csformer {

struct StageDims {
  int valid_h = 0;
  int valid_w = 0;
  int padded_h = 0;
  int padded_w = 0;

  bool padded() const { return valid_h != padded_h || valid_w != padded_w; }
  int pad_bottom() const { return padded_h - valid_h; }
  int pad_right() const { return padded_w - valid_w; }
  bool operator==(const StageDims&) const = default;
};

/// Spatial layout of every depth level for one input size. Level l holds the
/// original content in its top-left valid_h × valid_w region; the rest is zero
/// padding that attention never reads.
struct PadPlan {
  int input_h = 0;
  int input_w = 0;
  int window = 8;
  std::array<StageDims, kLevels> levels{};
  std::array<bool, kLevels> windowed{};

  const StageDims& level(int l) const { return levels[static_cast<std::size_t>(l)]; }
  /// Row-major validity map of level l over its padded extent (1 = original).
  std::vector<std::uint8_t> validity_map(int l) const;
  bool any_padding() const;
};

/// Feature padding: level l covers ceil(H / 2^l) × ceil(W / 2^l) original
/// positions, padded up to a multiple of the window at windowed levels.
PadPlan plan_padding(int h, int w, const ModelConfig& config);

/// Input padding: the image is zero-padded to a multiple of window · 2⁴ and
/// every level inherits the halved extents.
PadPlan plan_input_padding(int h, int w, const ModelConfig& config);

/// Additive masks for the windows of one level, one [L, L] mask per window in
/// row-major window order. A pair is kept when both tokens are original
/// content and, for shifted windows, come from the same cyclic-shift region.
/// A query with nothing to attend to keeps only itself.
AttentionMask build_pad_mask(const PadPlan& plan, int level, int shift);

/// Mask for full-map attention at a level (one [L, L] mask, L = padded area).
AttentionMask build_global_mask(const PadPlan& plan, int level);

/// Gather index turning x [N,C,H,W] into windows [N·nW, C, w, w] after a
/// cyclic roll by -shift along both spatial axes.
IndexMap window_partition_map(const Shape& x_shape, int window, int shift);
/// Inverse of window_partition_map.
IndexMap window_reverse_map(const Shape& x_shape, int window, int shift);

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, int window, int shift = 0) {
  return gather(x, window_partition_map(x.shape(), window, shift));
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, const Shape& x_shape, int window, int shift = 0) {
  return gather(windows, window_reverse_map(x_shape, window, shift));
}

}  // namespace csformer
