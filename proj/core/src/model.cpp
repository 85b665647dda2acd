#include "csformer/model.hpp"

#include <cmath>
#include <map>
#include <tuple>

#include "csformer/error.hpp"
#include "csformer/mac_counter.hpp"

namespace csformer {
namespace {

// ---- attention index maps --------------------------------------------------

struct TileGeometry {
  int n, channels, h, w, heads, tile_h, tile_w, shift;
  int tiles_y() const { return h / tile_h; }
  int tiles_x() const { return w / tile_w; }
  int tokens() const { return tile_h * tile_w; }
  int head_dim() const { return channels / heads; }
  auto key() const { return std::tuple(n, channels, h, w, heads, tile_h, tile_w, shift); }
};

// [N, 3d, H, W] -> [N·tiles·heads, L, d/heads] for one of q (0), k (1), v (2).
IndexMap build_split(const TileGeometry& g, int part) {
  const int dh = g.head_dim(), l = g.tokens();
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(g.n) * g.channels * g.h * g.w);
  for (int b = 0; b < g.n; ++b)
    for (int ty = 0; ty < g.tiles_y(); ++ty)
      for (int tx = 0; tx < g.tiles_x(); ++tx)
        for (int head = 0; head < g.heads; ++head)
          for (int t = 0; t < l; ++t) {
            const int y = (ty * g.tile_h + t / g.tile_w + g.shift) % g.h;
            const int x = (tx * g.tile_w + t % g.tile_w + g.shift) % g.w;
            for (int c = 0; c < dh; ++c) {
              const std::int64_t ch = static_cast<std::int64_t>(part) * g.channels + head * dh + c;
              index->push_back(((static_cast<std::int64_t>(b) * 3 * g.channels + ch) * g.h + y) * g.w + x);
            }
          }
  const int batch = g.n * g.tiles_y() * g.tiles_x() * g.heads;
  return IndexMap{{batch, l, dh}, std::move(index)};
}

// [N·tiles·heads, L, d/heads] -> [N, d, H, W].
IndexMap build_merge(const TileGeometry& g) {
  const int dh = g.head_dim(), l = g.tokens();
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(g.n) * g.channels * g.h * g.w);
  for (int b = 0; b < g.n; ++b)
    for (int ch = 0; ch < g.channels; ++ch)
      for (int y = 0; y < g.h; ++y) {
        const int ry = (y - g.shift + g.h) % g.h;
        for (int x = 0; x < g.w; ++x) {
          const int rx = (x - g.shift + g.w) % g.w;
          const std::int64_t tile =
              static_cast<std::int64_t>(b) * g.tiles_y() * g.tiles_x() + (ry / g.tile_h) * g.tiles_x() + rx / g.tile_w;
          const std::int64_t row = tile * g.heads + ch / dh;
          const int t = (ry % g.tile_h) * g.tile_w + rx % g.tile_w;
          index->push_back((row * l + t) * dh + ch % dh);
        }
      }
  return IndexMap{{g.n, g.channels, g.h, g.w}, std::move(index)};
}

// Table [(2w-1)², heads] -> bias [heads, L, L].
IndexMap build_relative_bias(int window, int heads) {
  const int l = window * window, span = 2 * window - 1;
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(heads) * l * l);
  for (int head = 0; head < heads; ++head)
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < l; ++j) {
        const int dy = i / window - j / window + window - 1;
        const int dx = i % window - j % window + window - 1;
        index->push_back(static_cast<std::int64_t>(dy * span + dx) * heads + head);
      }
  return IndexMap{{heads, l, l}, std::move(index)};
}

const IndexMap& tile_map(const TileGeometry& g, int part) {
  thread_local std::map<std::tuple<int, int, int, int, int, int, int, int, int>, IndexMap> cache;
  auto key = std::tuple_cat(g.key(), std::tuple(part));
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  if (cache.size() > 512) cache.clear();
  return cache.emplace(key, part < 3 ? build_split(g, part) : build_merge(g)).first->second;
}

const IndexMap& relative_bias_map(int window, int heads) {
  thread_local std::map<std::pair<int, int>, IndexMap> cache;
  auto key = std::pair(window, heads);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  return cache.emplace(key, build_relative_bias(window, heads)).first->second;
}

// ---- helpers ----------------------------------------------------------------

template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, const ParamStore<T>& p, const std::string& name) {
  return conv2d(x, p.at(name + ".weight"), p.find(name + ".bias"));
}

template <typename T>
Tensor<T> restrict_to(const Tensor<T>& x, const StageDims* dims) {
  if (dims == nullptr || !dims->padded()) return x;
  return zero_outside(x, dims->valid_h, dims->valid_w);
}

template <typename T>
Tensor<T> attention(const Tensor<T>& x, const ParamStore<T>& p, const std::string& prefix, int heads, int tile_h,
                    int tile_w, int shift, const AttentionMask* mask) {
  if (x.rank() != 4) throw ShapeError("attention expects [N,d,H,W], got " + shape_to_string(x.shape()));
  const int d = x.dim(1);
  if (heads < 1 || d % heads != 0) {
    throw ShapeError(std::to_string(heads) + " heads do not divide width " + std::to_string(d));
  }
  if (x.dim(2) % tile_h != 0 || x.dim(3) % tile_w != 0) {
    throw ShapeError("spatial extents " + shape_to_string(x.shape()) + " are not multiples of the attention window");
  }
  const TileGeometry g{x.dim(0), d, x.dim(2), x.dim(3), heads, tile_h, tile_w, shift};
  Tensor<T> qkv;
  {
    MacClassScope scope(MacClass::kAttnQkv);
    qkv = pointwise(x, p, prefix + ".qkv");
  }
  Tensor<T> q = gather(qkv, tile_map(g, 0));
  Tensor<T> k = gather(qkv, tile_map(g, 1));
  Tensor<T> v = gather(qkv, tile_map(g, 2));
  Tensor<T> logits;
  {
    MacClassScope scope(MacClass::kAttnLogits);
    logits = scale(matmul(q, k, Transpose::kNo, Transpose::kYes), static_cast<T>(1.0 / std::sqrt(g.head_dim())));
  }
  if (Tensor<T> table = p.find(prefix + ".rel_bias"); table.defined() && tile_h == tile_w) {
    logits = add_periodic(logits, gather(table, relative_bias_map(tile_h, heads)));
  }
  Tensor<T> weights = masked_softmax(logits, mask, heads);
  Tensor<T> mixed;
  {
    MacClassScope scope(MacClass::kAttnValues);
    mixed = matmul(weights, v);
  }
  Tensor<T> merged = gather(mixed, tile_map(g, 3));
  MacClassScope scope(MacClass::kAttnProj);
  return pointwise(merged, p, prefix + ".proj");
}

const AttentionMask* mask_or_null(const std::optional<AttentionMask>& mask) {
  return mask ? &*mask : nullptr;
}

}  // namespace

AttnKind block_attn_kind(const ModelConfig& config, int stage, int block) {
  if (config.global_attention[static_cast<std::size_t>(ModelConfig::stage_level(stage))]) return AttnKind::kGlobal;
  return block % 2 == 0 ? AttnKind::kWindow : AttnKind::kShifted;
}

ForwardContext::ForwardContext(const PadPlan& p, const ModelConfig& config) : plan(p) {
  for (int l = 0; l < kLevels; ++l) {
    LevelContext& lc = levels[static_cast<std::size_t>(l)];
    lc.dims = plan.level(l);
    lc.window = plan.window;
    if (plan.windowed[static_cast<std::size_t>(l)]) {
      if (lc.dims.padded()) lc.window_mask = build_pad_mask(plan, l, 0);
      lc.shifted_mask = build_pad_mask(plan, l, config.shift_size());
    } else if (lc.dims.padded()) {
      lc.global_mask = build_global_mask(plan, l);
    }
  }
}

template <typename T>
Tensor<T> shallow_embed(const Tensor<T>& image, const ParamStore<T>& params) {
  MacClassScope scope(MacClass::kConv);
  return conv2d(image, params.at("embed.weight"), params.find("embed.bias"), {1, 1, 1});
}

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix,
                            std::optional<std::pair<int, int>> valid) {
  if (x.rank() != 4 || x.dim(1) % 2 != 0) {
    throw ShapeError("channel attention needs an even channel count, got " + shape_to_string(x.shape()));
  }
  const int half = x.dim(1) / 2;
  Tensor<T> gated = mul(slice_channels(x, 0, half), slice_channels(x, half, 2 * half));
  MacClassScope scope(MacClass::kConv);
  Tensor<T> weights = pointwise(global_avg_pool(gated, valid), params, prefix + ".mlp");
  return pointwise(channel_mul(gated, weights), params, prefix + ".proj");
}

template <typename T>
Tensor<T> window_msa(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix, int heads,
                     int window, int shift, const AttentionMask* mask) {
  if (shift < 0 || shift >= window) throw ShapeError("shift must lie in [0, window)");
  return attention(x, params, prefix, heads, window, window, shift, mask);
}

template <typename T>
Tensor<T> global_msa(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix, int heads,
                     const AttentionMask* mask) {
  return attention(x, params, prefix, heads, x.dim(2), x.dim(3), 0, mask);
}

template <typename T>
Tensor<T> gcffn(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix, const StageDims* dims) {
  MacClassScope scope(MacClass::kGcffn);
  auto depthwise = [&](const Tensor<T>& t, const std::string& name) {
    return conv2d(restrict_to(t, dims), params.at(name + ".weight"), params.find(name + ".bias"),
                  {1, 1, t.dim(1)});
  };
  Tensor<T> x1 = depthwise(pointwise(x, params, prefix + ".pw1"), prefix + ".dw1");
  Tensor<T> x2 = depthwise(pointwise(x, params, prefix + ".pw2"), prefix + ".dw2");
  return pointwise(mul(gelu(x1), x2), params, prefix + ".pw3");
}

template <typename T>
Tensor<T> csformer_block(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix,
                         const ModelConfig& config, int level, AttnKind kind, const LevelContext& ctx) {
  const int heads = config.heads_per_level[static_cast<std::size_t>(level)];
  const StageDims* dims = &ctx.dims;
  std::optional<std::pair<int, int>> valid;
  if (dims->padded()) valid = std::pair(dims->valid_h, dims->valid_w);

  auto msa = [&](const Tensor<T>& t) {
    switch (kind) {
      case AttnKind::kWindow:
        return window_msa(t, params, prefix + ".attn", heads, ctx.window, 0, mask_or_null(ctx.window_mask));
      case AttnKind::kShifted:
        return window_msa(t, params, prefix + ".attn", heads, ctx.window, config.shift_size(),
                          mask_or_null(ctx.shifted_mask));
      case AttnKind::kGlobal:
        break;
    }
    return global_msa(t, params, prefix + ".attn", heads, mask_or_null(ctx.global_mask));
  };

  Tensor<T> normed = layer_norm(x, params.at(prefix + ".ln1.gamma"), params.at(prefix + ".ln1.beta"));
  Tensor<T> attended = config.composition == AttnComposition::kParallel
                           ? add(msa(normed), channel_attention(normed, params, prefix + ".ca", valid))
                           : channel_attention(msa(normed), params, prefix + ".ca", valid);
  Tensor<T> y = add(x, attended);
  Tensor<T> ffn = gcffn(layer_norm(y, params.at(prefix + ".ln2.gamma"), params.at(prefix + ".ln2.beta")), params,
                        prefix + ".ffn", dims);
  return restrict_to(add(y, ffn), dims);
}

template <typename T>
Tensor<T> downsample(const Tensor<T>& x, const ParamStore<T>& params, int level, const StageDims& next) {
  MacClassScope scope(MacClass::kResampling);
  Tensor<T> folded = resize_spatial(pixel_unshuffle(x, 2), next.padded_h, next.padded_w);
  return restrict_to(pointwise(folded, params, "down" + std::to_string(level)), &next);
}

template <typename T>
Tensor<T> upsample(const Tensor<T>& x, const ParamStore<T>& params, int level, const StageDims& target) {
  MacClassScope scope(MacClass::kResampling);
  Tensor<T> expanded = pixel_shuffle(pointwise(x, params, "up" + std::to_string(level)), 2);
  return restrict_to(resize_spatial(expanded, target.padded_h, target.padded_w), &target);
}

template <typename T>
Tensor<T> skip_fuse(const Tensor<T>& dec, const Tensor<T>& enc, const ParamStore<T>& params, int level) {
  if (dec.shape() != enc.shape()) {
    throw ShapeError("skip fusion shapes differ: " + shape_to_string(dec.shape()) + " vs " +
                     shape_to_string(enc.shape()));
  }
  MacClassScope scope(MacClass::kConv);
  return pointwise(concat_channels(dec, enc), params, "fuse" + std::to_string(level));
}

template <typename T>
EncoderOutput<T> encode(const Tensor<T>& image, const ParamStore<T>& params, const ModelConfig& config,
                        const ForwardContext& ctx) {
  if (image.rank() != 4 || image.dim(1) != config.in_channels) {
    throw ShapeError("expected an image [N," + std::to_string(config.in_channels) + ",H,W], got " +
                     shape_to_string(image.shape()));
  }
  if (image.dim(2) != ctx.plan.input_h || image.dim(3) != ctx.plan.input_w) {
    throw ShapeError("image extents do not match the padding plan");
  }
  const StageDims& top = ctx.levels[0].dims;
  Tensor<T> x = restrict_to(shallow_embed(resize_spatial(image, top.padded_h, top.padded_w), params), &top);
  EncoderOutput<T> out;
  for (int stage = 0; stage <= 4; ++stage) {
    const LevelContext& lc = ctx.levels[static_cast<std::size_t>(stage)];
    for (int b = 0; b < config.blocks_per_stage[static_cast<std::size_t>(stage)]; ++b) {
      x = csformer_block(x, params, block_prefix(stage, b), config, stage, block_attn_kind(config, stage, b), lc);
    }
    if (stage < 4) {
      out.skips[static_cast<std::size_t>(stage)] = x;
      x = downsample(x, params, stage, ctx.levels[static_cast<std::size_t>(stage + 1)].dims);
    }
  }
  out.latent = x;
  return out;
}

template <typename T>
Tensor<T> decode(const EncoderOutput<T>& enc, const ParamStore<T>& params, const ModelConfig& config,
                 const ForwardContext& ctx) {
  Tensor<T> x = enc.latent;
  for (int stage = 5; stage < kStages; ++stage) {
    const int level = ModelConfig::stage_level(stage);
    const LevelContext& lc = ctx.levels[static_cast<std::size_t>(level)];
    x = upsample(x, params, level, lc.dims);
    x = restrict_to(skip_fuse(x, enc.skips[static_cast<std::size_t>(level)], params, level), &lc.dims);
    for (int b = 0; b < config.blocks_per_stage[static_cast<std::size_t>(stage)]; ++b) {
      x = csformer_block(x, params, block_prefix(stage, b), config, level, block_attn_kind(config, stage, b), lc);
    }
  }
  MacClassScope scope(MacClass::kConv);
  return conv2d(x, params.at("output.weight"), params.find("output.bias"), {1, 1, 1});
}

template <typename T>
ForwardResult<T> model_forward(const Tensor<T>& image, const ParamStore<T>& params, const ModelConfig& config,
                               const PadPlan* plan) {
  if (image.rank() != 4) throw ShapeError("expected an image [N,C,H,W], got " + shape_to_string(image.shape()));
  const ForwardContext ctx(plan ? *plan : plan_padding(image.dim(2), image.dim(3), config), config);
  EncoderOutput<T> enc = encode(image, params, config, ctx);
  ForwardResult<T> out;
  out.latent = enc.latent;
  out.residual = resize_spatial(decode(enc, params, config, ctx), image.dim(2), image.dim(3));
  if (config.pretrain_mode) {
    out.restored = out.residual;
  } else {
    const Tensor<T> base =
        config.in_channels == config.out_channels ? image : slice_channels(image, 0, config.out_channels);
    out.restored = add(base, out.residual);
  }
  return out;
}

#define CSFORMER_INSTANTIATE(T)                                                                                     \
  template Tensor<T> shallow_embed(const Tensor<T>&, const ParamStore<T>&);                                        \
  template Tensor<T> channel_attention(const Tensor<T>&, const ParamStore<T>&, const std::string&,                 \
                                       std::optional<std::pair<int, int>>);                                        \
  template Tensor<T> window_msa(const Tensor<T>&, const ParamStore<T>&, const std::string&, int, int, int,         \
                                const AttentionMask*);                                                             \
  template Tensor<T> global_msa(const Tensor<T>&, const ParamStore<T>&, const std::string&, int,                   \
                                const AttentionMask*);                                                             \
  template Tensor<T> gcffn(const Tensor<T>&, const ParamStore<T>&, const std::string&, const StageDims*);          \
  template Tensor<T> csformer_block(const Tensor<T>&, const ParamStore<T>&, const std::string&,                    \
                                    const ModelConfig&, int, AttnKind, const LevelContext&);                       \
  template Tensor<T> downsample(const Tensor<T>&, const ParamStore<T>&, int, const StageDims&);                    \
  template Tensor<T> upsample(const Tensor<T>&, const ParamStore<T>&, int, const StageDims&);                      \
  template Tensor<T> skip_fuse(const Tensor<T>&, const Tensor<T>&, const ParamStore<T>&, int);                     \
  template EncoderOutput<T> encode(const Tensor<T>&, const ParamStore<T>&, const ModelConfig&,                     \
                                   const ForwardContext&);                                                         \
  template Tensor<T> decode(const EncoderOutput<T>&, const ParamStore<T>&, const ModelConfig&,                     \
                            const ForwardContext&);                                                                \
  template ForwardResult<T> model_forward(const Tensor<T>&, const ParamStore<T>&, const ModelConfig&,              \
                                          const PadPlan*);

CSFORMER_INSTANTIATE(float)
CSFORMER_INSTANTIATE(double)

}  // namespace csformer
