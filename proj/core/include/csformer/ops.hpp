#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "csformer/tensor.hpp"

// Differentiable operations. Every op validates its operand shapes, computes
// the forward value, and records a backward closure when a tape is active and
// an operand requires a gradient.

namespace csformer {

// ---- elementwise ----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <typename T>
Tensor<T> square_root(const Tensor<T>& a);

/// Channel-wise product: `gate` has shape [N,C,1,1] or [1,C,1,1] and scales
/// every spatial position of the matching channel of `x` [N,C,H,W].
template <typename T>
Tensor<T> channel_mul(const Tensor<T>& x, const Tensor<T>& gate);

/// Adds `b` to `a` where `a` is a stack of copies of b's shape along the
/// leading axis (a.numel() is a multiple of b.numel()).
template <typename T>
Tensor<T> add_periodic(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
/// Mean computed as x₀ + Σ(xᵢ − x₀)/n so a constant tensor reduces exactly.
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

// ---- linear algebra -------------------------------------------------------

enum class Transpose : bool { kNo = false, kYes = true };

/// [M,K]·[K,N] or batched [B,M,K]·[B,K,N]; the flags transpose the trailing
/// two axes of an operand before the product.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose ta = Transpose::kNo,
                 Transpose tb = Transpose::kNo);

struct Conv2dOptions {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

/// x [N,Cin,H,W], weight [Cout,Cin/groups,kh,kw], bias [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opts = {});

// ---- normalisation and activations ----------------------------------------

/// Normalises each spatial token of x [N,C,H,W] over its C channels.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-6);

/// Exact Gaussian-CDF GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Additive attention mask: 0 keeps a (query, key) pair, -inf excludes it.
/// Holds `count` independent [rows, cols] masks.
struct AttentionMask {
  static constexpr float kKeep = 0.0f;
  static constexpr float kExclude = -std::numeric_limits<float>::infinity();

  int count = 0;
  int rows = 0;
  int cols = 0;
  std::vector<float> additive;

  AttentionMask() = default;
  AttentionMask(int count, int rows, int cols, float fill = kKeep);

  bool keeps(int group, int row, int col) const {
    return additive[(static_cast<std::size_t>(group) * rows + row) * cols + col] == kKeep;
  }
  void set(int group, int row, int col, bool keep) {
    additive[(static_cast<std::size_t>(group) * rows + row) * cols + col] = keep ? kKeep : kExclude;
  }
  std::int64_t excluded_count() const;
};

/// Row softmax over the last axis of logits [B, L, L'] (any leading shape
/// whose product is B). Matrix b uses mask (b / mask_stride) % mask.count.
/// Excluded entries receive exactly zero weight; a fully excluded row throws.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const AttentionMask* mask = nullptr, int mask_stride = 1);

/// Per-channel spatial mean [N,C,H,W] -> [N,C,1,1]. When `valid` is given,
/// only the top-left valid_h × valid_w region contributes.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x, std::optional<std::pair<int, int>> valid = std::nullopt);

// ---- layout ---------------------------------------------------------------

/// [N,C,H,W] -> [N,C·r²,H/r,W/r] with output channel c·r² + dy·r + dx.
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r);
/// Exact inverse of pixel_unshuffle.
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r);

/// Output element i takes source element index[i]; -1 yields zero.
struct IndexMap {
  Shape out_shape;
  std::shared_ptr<const std::vector<std::int64_t>> source;
};

template <typename T>
Tensor<T> gather(const Tensor<T>& x, const IndexMap& map);

/// Channels [begin, end) of x [N,C,H,W].
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end);
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Zeroes every position outside the top-left valid_h × valid_w region.
template <typename T>
Tensor<T> zero_outside(const Tensor<T>& x, int valid_h, int valid_w);

/// Top-left anchored crop or zero-pad of the spatial extents of x [N,C,H,W].
template <typename T>
Tensor<T> resize_spatial(const Tensor<T>& x, int out_h, int out_w);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

}  // namespace csformer
