#include <algorithm>

#include "csformer/ops.hpp"
#include "op_support.hpp"

namespace csformer {

using detail::require;

namespace {

// Shared by shuffle and unshuffle: visits every (low-res, high-res) index pair
// of the rearrangement between [N,C·r²,h,w] and [N,C,h·r,w·r].
template <typename Fn>
void for_each_shuffle_pair(int n, int c, int h, int w, int r, Fn&& fn) {
  const int hr = h * r, wr = w * r;
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      for (int dy = 0; dy < r; ++dy) {
        for (int dx = 0; dx < r; ++dx) {
          const int lc = ch * r * r + dy * r + dx;
          const std::size_t low_base = (static_cast<std::size_t>(b) * c * r * r + lc) * h * w;
          const std::size_t high_base = (static_cast<std::size_t>(b) * c + ch) * hr * wr;
          for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
              fn(low_base + static_cast<std::size_t>(y) * w + x,
                 high_base + static_cast<std::size_t>(y * r + dy) * wr + x * r + dx);
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
  require(x.rank() == 4 && r >= 1, "pixel_unshuffle: expects [N,C,H,W] and r >= 1");
  const int n = x.dim(0), c = x.dim(1), hh = x.dim(2), ww = x.dim(3);
  require(hh % r == 0 && ww % r == 0, "pixel_unshuffle: spatial extents " + shape_to_string(x.shape()) +
                                          " not divisible by " + std::to_string(r));
  const int h = hh / r, w = ww / r;
  Tensor<T> out(Shape{n, c * r * r, h, w});
  {
    auto o = out.mutable_data();
    auto xs = x.data();
    for_each_shuffle_pair(n, c, h, w, r, [&](std::size_t low, std::size_t high) { o[low] = xs[high]; });
  }
  if (auto* tape = recording_tape({&x})) {
    tape->record(out, [x, n, c, h, w, r](const Tensor<T>& out) mutable {
      auto go = out.grad();
      auto g = x.grad_buffer();
      for_each_shuffle_pair(n, c, h, w, r, [&](std::size_t low, std::size_t high) { g[high] += go[low]; });
    });
  }
  return out;
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  require(x.rank() == 4 && r >= 1, "pixel_shuffle: expects [N,C,H,W] and r >= 1");
  const int n = x.dim(0), cr = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(cr % (r * r) == 0, "pixel_shuffle: channels " + std::to_string(cr) + " not divisible by " +
                                 std::to_string(r * r));
  const int c = cr / (r * r);
  Tensor<T> out(Shape{n, c, h * r, w * r});
  {
    auto o = out.mutable_data();
    auto xs = x.data();
    for_each_shuffle_pair(n, c, h, w, r, [&](std::size_t low, std::size_t high) { o[high] = xs[low]; });
  }
  if (auto* tape = recording_tape({&x})) {
    tape->record(out, [x, n, c, h, w, r](const Tensor<T>& out) mutable {
      auto go = out.grad();
      auto g = x.grad_buffer();
      for_each_shuffle_pair(n, c, h, w, r, [&](std::size_t low, std::size_t high) { g[low] += go[high]; });
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, const IndexMap& map) {
  require(map.source != nullptr, "gather: empty index map");
  const auto& index = *map.source;
  require(static_cast<std::int64_t>(index.size()) == shape_numel(map.out_shape),
          "gather: index count does not match output shape " + shape_to_string(map.out_shape));
  const std::int64_t limit = x.numel();
  Tensor<T> out(map.out_shape);
  {
    auto o = out.mutable_data();
    auto xs = x.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
      const std::int64_t s = index[i];
      if (s < 0) continue;
      if (s >= limit) throw ShapeError("gather: source index out of range");
      o[i] = xs[static_cast<std::size_t>(s)];
    }
  }
  if (auto* tape = recording_tape({&x})) {
    tape->record(out, [x, source = map.source](const Tensor<T>& out) mutable {
      auto go = out.grad();
      auto g = x.grad_buffer();
      const auto& index = *source;
      for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= 0) g[static_cast<std::size_t>(index[i])] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end) {
  require(x.rank() == 4, "slice_channels: expects [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(0 <= begin && begin < end && end <= c, "slice_channels: invalid channel range");
  const int width = end - begin;
  Tensor<T> out(Shape{n, width, x.dim(2), x.dim(3)});
  {
    auto o = out.mutable_data();
    auto xs = x.data();
    for (int b = 0; b < n; ++b) {
      const T* src = xs.data() + (static_cast<std::size_t>(b) * c + begin) * hw;
      std::copy(src, src + static_cast<std::size_t>(width) * hw, o.data() + static_cast<std::size_t>(b) * width * hw);
    }
  }
  if (auto* tape = recording_tape({&x})) {
    tape->record(out, [x, n, c, hw, begin, width](const Tensor<T>& out) mutable {
      auto go = out.grad();
      auto g = x.grad_buffer();
      for (int b = 0; b < n; ++b) {
        T* dst = g.data() + (static_cast<std::size_t>(b) * c + begin) * hw;
        const T* src = go.data() + static_cast<std::size_t>(b) * width * hw;
        for (std::size_t i = 0; i < static_cast<std::size_t>(width) * hw; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: incompatible shapes " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  const std::size_t sa = static_cast<std::size_t>(ca) * hw, sb = static_cast<std::size_t>(cb) * hw;
  Tensor<T> out(Shape{n, ca + cb, a.dim(2), a.dim(3)});
  {
    auto o = out.mutable_data();
    auto xa = a.data(), xb = b.data();
    for (int i = 0; i < n; ++i) {
      T* dst = o.data() + i * (sa + sb);
      std::copy(xa.data() + i * sa, xa.data() + (i + 1) * sa, dst);
      std::copy(xb.data() + i * sb, xb.data() + (i + 1) * sb, dst + sa);
    }
  }
  if (auto* tape = recording_tape({&a, &b})) {
    tape->record(out, [a, b, n, sa, sb](const Tensor<T>& out) mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_buffer();
        for (int i = 0; i < n; ++i) {
          const T* src = go.data() + i * (sa + sb);
          for (std::size_t k = 0; k < sa; ++k) g[i * sa + k] += src[k];
        }
      }
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        for (int i = 0; i < n; ++i) {
          const T* src = go.data() + i * (sa + sb) + sa;
          for (std::size_t k = 0; k < sb; ++k) g[i * sb + k] += src[k];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> zero_outside(const Tensor<T>& x, int valid_h, int valid_w) {
  require(x.rank() == 4, "zero_outside: expects [N,C,H,W]");
  const int h = x.dim(2), w = x.dim(3);
  require(0 <= valid_h && valid_h <= h && 0 <= valid_w && valid_w <= w, "zero_outside: region outside the map");
  auto keep = [=](std::size_t i) {
    const auto p = static_cast<int>(i % (static_cast<std::size_t>(h) * w));
    return p / w < valid_h && p % w < valid_w;
  };
  Tensor<T> out(x.shape());
  {
    auto o = out.mutable_data();
    auto xs = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = keep(i) ? xs[i] : T{0};
  }
  if (auto* tape = recording_tape({&x})) {
    tape->record(out, [x, keep](const Tensor<T>& out) mutable {
      auto go = out.grad();
      auto g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (keep(i)) g[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> resize_spatial(const Tensor<T>& x, int out_h, int out_w) {
  require(x.rank() == 4 && out_h >= 1 && out_w >= 1, "resize_spatial: expects [N,C,H,W] and positive extents");
  const int planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) return x;
  auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(planes) * out_h * out_w, -1);
  for (int p = 0; p < planes; ++p) {
    for (int y = 0; y < std::min(h, out_h); ++y) {
      for (int xx = 0; xx < std::min(w, out_w); ++xx) {
        (*index)[(static_cast<std::size_t>(p) * out_h + y) * out_w + xx] =
            (static_cast<std::int64_t>(p) * h + y) * w + xx;
      }
    }
  }
  return gather(x, IndexMap{Shape{x.dim(0), x.dim(1), out_h, out_w}, std::move(index)});
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape: element count differs for " + shape_to_string(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (auto* tape = recording_tape({&x})) {
    tape->record(out, [x](const Tensor<T>& out) mutable { x.accumulate_grad(out.grad()); });
  }
  return out;
}

#define CSFORMER_INSTANTIATE(T)                                                \
  template Tensor<T> pixel_unshuffle(const Tensor<T>&, int);                   \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, int);                     \
  template Tensor<T> gather(const Tensor<T>&, const IndexMap&);                \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);               \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> zero_outside(const Tensor<T>&, int, int);                 \
  template Tensor<T> resize_spatial(const Tensor<T>&, int, int);               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);

CSFORMER_INSTANTIATE(float)
CSFORMER_INSTANTIATE(double)

#undef CSFORMER_INSTANTIATE

}  // namespace csformer
