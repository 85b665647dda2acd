#include <algorithm>
#include <array>

#include "csformer/mac_counter.hpp"
#include "csformer/ops.hpp"
#include "op_support.hpp"

namespace csformer {

using detail::require;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Transpose ta_flag, Transpose tb_flag) {
  const bool ta = ta_flag == Transpose::kYes;
  const bool tb = tb_flag == Transpose::kYes;
  require(a.rank() == b.rank() && (a.rank() == 2 || a.rank() == 3),
          "matmul: operands must both be rank 2 or rank 3, got " + shape_to_string(a.shape()) + " and " +
              shape_to_string(b.shape()));
  const bool batched = a.rank() == 3;
  const int batch = batched ? a.dim(0) : 1;
  require(!batched || b.dim(0) == batch, "matmul: batch extents differ");
  const int a_rows = a.dim(-2), a_cols = a.dim(-1);
  const int b_rows = b.dim(-2), b_cols = b.dim(-1);
  const int m = ta ? a_cols : a_rows;
  const int k = ta ? a_rows : a_cols;
  const int kb = tb ? b_cols : b_rows;
  const int n = tb ? b_rows : b_cols;
  require(k == kb, "matmul: inner dimensions differ in " + shape_to_string(a.shape()) + " · " +
                       shape_to_string(b.shape()));

  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor<T> out(out_shape);
  const std::size_t a_stride = static_cast<std::size_t>(a_rows) * a_cols;
  const std::size_t b_stride = static_cast<std::size_t>(b_rows) * b_cols;
  const std::size_t c_stride = static_cast<std::size_t>(m) * n;
  {
    auto o = out.mutable_data();
    auto x = a.data(), y = b.data();
    for (int i = 0; i < batch; ++i) {
      detail::gemm(ta, tb, m, n, k, T{1}, x.data() + i * a_stride, a_cols, y.data() + i * b_stride, b_cols, T{0},
                   o.data() + i * c_stride, n);
    }
  }
  MacTally::add(static_cast<std::int64_t>(batch) * m * n * k);
  detail::check_finite(out, "matmul");

  if (auto* tape = recording_tape({&a, &b})) {
    tape->record(out, [a, b, ta, tb, batch, m, n, k, a_cols, b_cols, a_stride, b_stride,
                       c_stride](const Tensor<T>& out) mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_buffer();
        auto y = b.data();
        for (int i = 0; i < batch; ++i) {
          const T* dc = go.data() + i * c_stride;
          const T* bb = y.data() + i * b_stride;
          T* da = g.data() + i * a_stride;
          if (!ta) {
            detail::gemm(false, !tb, m, k, n, T{1}, dc, n, bb, b_cols, T{1}, da, a_cols);
          } else {
            detail::gemm(tb, true, k, m, n, T{1}, bb, b_cols, dc, n, T{1}, da, a_cols);
          }
        }
      }
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        auto x = a.data();
        for (int i = 0; i < batch; ++i) {
          const T* dc = go.data() + i * c_stride;
          const T* aa = x.data() + i * a_stride;
          T* db = g.data() + i * b_stride;
          if (!tb) {
            detail::gemm(!ta, false, k, n, m, T{1}, aa, a_cols, dc, n, T{1}, db, b_cols);
          } else {
            detail::gemm(true, ta, n, k, m, T{1}, dc, n, aa, a_cols, T{1}, db, b_cols);
          }
        }
      }
    });
  }
  return out;
}

namespace {

struct ConvGeometry {
  int n, cin, h, w;
  int cout, kh, kw;
  int stride, pad, groups;
  int ho, wo;
  int cin_g() const { return cin / groups; }
  int cout_g() const { return cout / groups; }
  int spatial_out() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return groups == cin && cout == cin && groups > 1; }
};

// col[(c·kh + i)·kw + j][y·wo + x] = x[c][y·s − p + i][x·s − p + j]
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* col) {
  const int cin_g = g.cin_g();
  for (int c = 0; c < cin_g; ++c) {
    const T* plane = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        T* row = col + (static_cast<std::size_t>(c * g.kh + i) * g.kw + j) * g.spatial_out();
        for (int y = 0; y < g.ho; ++y) {
          const int sy = y * g.stride - g.pad + i;
          T* dst = row + static_cast<std::size_t>(y) * g.wo;
          if (sy < 0 || sy >= g.h) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * g.w;
          for (int xo = 0; xo < g.wo; ++xo) {
            const int sx = xo * g.stride - g.pad + j;
            dst[xo] = (sx >= 0 && sx < g.w) ? src[sx] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx) {
  const int cin_g = g.cin_g();
  for (int c = 0; c < cin_g; ++c) {
    T* plane = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const T* row = col + (static_cast<std::size_t>(c * g.kh + i) * g.kw + j) * g.spatial_out();
        for (int y = 0; y < g.ho; ++y) {
          const int sy = y * g.stride - g.pad + i;
          if (sy < 0 || sy >= g.h) continue;
          const T* src = row + static_cast<std::size_t>(y) * g.wo;
          T* dst = plane + static_cast<std::size_t>(sy) * g.w;
          for (int xo = 0; xo < g.wo; ++xo) {
            const int sx = xo * g.stride - g.pad + j;
            if (sx >= 0 && sx < g.w) dst[sx] += src[xo];
          }
        }
      }
    }
  }
}

// Output columns xo for which xo·s − p + j lies inside [0, w).
inline std::pair<int, int> valid_range(int stride, int pad, int tap, int in_extent, int out_extent) {
  int lo = 0;
  while (lo < out_extent && lo * stride - pad + tap < 0) ++lo;
  int hi = out_extent;
  while (hi > lo && (hi - 1) * stride - pad + tap >= in_extent) --hi;
  return {lo, hi};
}

template <typename T>
void depthwise_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* out) {
  for (int b = 0; b < g.n; ++b) {
    for (int c = 0; c < g.cin; ++c) {
      const T* plane = x + (static_cast<std::size_t>(b) * g.cin + c) * g.h * g.w;
      T* dst = out + (static_cast<std::size_t>(b) * g.cout + c) * g.spatial_out();
      std::fill(dst, dst + g.spatial_out(), bias ? bias[c] : T{0});
      const T* kernel = w + static_cast<std::size_t>(c) * g.kh * g.kw;
      for (int i = 0; i < g.kh; ++i) {
        const auto [ylo, yhi] = valid_range(g.stride, g.pad, i, g.h, g.ho);
        for (int j = 0; j < g.kw; ++j) {
          const T k = kernel[i * g.kw + j];
          const auto [xlo, xhi] = valid_range(g.stride, g.pad, j, g.w, g.wo);
          const int shift = j - g.pad;
          for (int y = ylo; y < yhi; ++y) {
            const T* src = plane + static_cast<std::size_t>(y * g.stride - g.pad + i) * g.w;
            T* row = dst + static_cast<std::size_t>(y) * g.wo;
            if (g.stride == 1) {
              const T* shifted = src + shift;
              for (int xo = xlo; xo < xhi; ++xo) row[xo] += k * shifted[xo];
            } else {
              for (int xo = xlo; xo < xhi; ++xo) row[xo] += k * src[xo * g.stride + shift];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const ConvGeometry& g, const T* x, const T* w, const T* go, T* dx, T* dw) {
  for (int b = 0; b < g.n; ++b) {
    for (int c = 0; c < g.cin; ++c) {
      const T* plane = x + (static_cast<std::size_t>(b) * g.cin + c) * g.h * g.w;
      T* dplane = dx ? dx + (static_cast<std::size_t>(b) * g.cin + c) * g.h * g.w : nullptr;
      const T* grow0 = go + (static_cast<std::size_t>(b) * g.cout + c) * g.spatial_out();
      const T* kernel = w + static_cast<std::size_t>(c) * g.kh * g.kw;
      T* dkernel = dw ? dw + static_cast<std::size_t>(c) * g.kh * g.kw : nullptr;
      for (int i = 0; i < g.kh; ++i) {
        const auto [ylo, yhi] = valid_range(g.stride, g.pad, i, g.h, g.ho);
        for (int j = 0; j < g.kw; ++j) {
          const T k = kernel[i * g.kw + j];
          const auto [xlo, xhi] = valid_range(g.stride, g.pad, j, g.w, g.wo);
          const int shift = j - g.pad;
          // Eight partial sums keep the reduction vectorisable and its order fixed.
          std::array<T, 8> lanes{};
          for (int y = ylo; y < yhi; ++y) {
            const std::size_t row_off = static_cast<std::size_t>(y * g.stride - g.pad + i) * g.w;
            const T* grow = grow0 + static_cast<std::size_t>(y) * g.wo;
            if (g.stride == 1) {
              if (dkernel) {
                const T* src = plane + row_off + shift;
                int xo = xlo;
                for (; xo + 8 <= xhi; xo += 8)
                  for (int l = 0; l < 8; ++l) lanes[l] += grow[xo + l] * src[xo + l];
                for (; xo < xhi; ++xo) lanes[0] += grow[xo] * src[xo];
              }
              if (dplane) {
                T* dst = dplane + row_off + shift;
                for (int xo = xlo; xo < xhi; ++xo) dst[xo] += k * grow[xo];
              }
              continue;
            }
            if (dkernel) {
              const T* src = plane + row_off;
              for (int xo = xlo; xo < xhi; ++xo) lanes[0] += grow[xo] * src[xo * g.stride + shift];
            }
            if (dplane) {
              T* dst = dplane + row_off;
              for (int xo = xlo; xo < xhi; ++xo) dst[xo * g.stride + shift] += k * grow[xo];
            }
          }
          if (dkernel) {
            T acc{0};
            for (T lane : lanes) acc += lane;
            dkernel[i * g.kw + j] += acc;
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opts) {
  require(x.rank() == 4 && weight.rank() == 4, "conv2d: expects x [N,C,H,W] and weight [Cout,Cin/g,kh,kw]");
  require(opts.stride >= 1 && opts.pad >= 0 && opts.groups >= 1, "conv2d: invalid stride/pad/groups");
  ConvGeometry g{};
  g.n = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = opts.stride;
  g.pad = opts.pad;
  g.groups = opts.groups;
  require(g.cin % g.groups == 0 && g.cout % g.groups == 0,
          "conv2d: channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) + " not divisible by groups " +
              std::to_string(g.groups));
  require(weight.dim(1) == g.cin_g(), "conv2d: weight " + shape_to_string(weight.shape()) +
                                          " does not match input channels " + std::to_string(g.cin) + " / groups " +
                                          std::to_string(g.groups));
  require(!bias.defined() || (bias.rank() == 1 && bias.dim(0) == g.cout), "conv2d: bias must have shape [Cout]");
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  require(g.h + 2 * g.pad >= g.kh && g.w + 2 * g.pad >= g.kw, "conv2d: kernel larger than padded input");

  Tensor<T> out(Shape{g.n, g.cout, g.ho, g.wo});
  const std::size_t in_plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t out_plane = static_cast<std::size_t>(g.spatial_out());
  const int kdim = g.cin_g() * g.kh * g.kw;
  {
    auto o = out.mutable_data();
    auto xs = x.data();
    auto ws = weight.data();
    const T* bs = bias.defined() ? bias.data().data() : nullptr;
    if (g.depthwise()) {
      depthwise_forward(g, xs.data(), ws.data(), bs, o.data());
    } else {
      std::vector<T> col;
      if (!g.pointwise()) col.resize(static_cast<std::size_t>(kdim) * out_plane);
      for (int b = 0; b < g.n; ++b) {
        for (int grp = 0; grp < g.groups; ++grp) {
          const T* xin = xs.data() + (static_cast<std::size_t>(b) * g.cin + grp * g.cin_g()) * in_plane;
          const T* colp = xin;
          if (!g.pointwise()) {
            im2col(g, xin, col.data());
            colp = col.data();
          }
          T* dst = o.data() + (static_cast<std::size_t>(b) * g.cout + grp * g.cout_g()) * out_plane;
          const T* wg = ws.data() + static_cast<std::size_t>(grp) * g.cout_g() * kdim;
          if (bs) {
            for (int c = 0; c < g.cout_g(); ++c) {
              std::fill(dst + c * out_plane, dst + (c + 1) * out_plane, bs[grp * g.cout_g() + c]);
            }
          }
          detail::gemm(false, false, g.cout_g(), g.spatial_out(), kdim, T{1}, wg, kdim, colp, g.spatial_out(),
                       bs ? T{1} : T{0}, dst, g.spatial_out());
        }
      }
    }
  }
  MacTally::add(static_cast<std::int64_t>(g.n) * g.cout * g.cin_g() * g.kh * g.kw * g.ho * g.wo);
  detail::check_finite(out, "conv2d");

  if (auto* tape = recording_tape({&x, &weight, &bias})) {
    tape->record(out, [x, weight, bias, g, kdim, in_plane, out_plane](const Tensor<T>& out) mutable {
      auto go = out.grad();
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad_buffer();
        for (int b = 0; b < g.n; ++b) {
          for (int c = 0; c < g.cout; ++c) {
            const T* row = go.data() + (static_cast<std::size_t>(b) * g.cout + c) * out_plane;
            T acc{0};
            for (std::size_t p = 0; p < out_plane; ++p) acc += row[p];
            gb[c] += acc;
          }
        }
      }
      const bool need_dx = x.requires_grad();
      const bool need_dw = weight.requires_grad();
      if (!need_dx && !need_dw) return;
      auto xs = x.data();
      auto ws = weight.data();
      T* dx = need_dx ? x.grad_buffer().data() : nullptr;
      T* dw = need_dw ? weight.grad_buffer().data() : nullptr;
      if (g.depthwise()) {
        depthwise_backward(g, xs.data(), ws.data(), go.data(), dx, dw);
        return;
      }
      std::vector<T> col;
      std::vector<T> dcol;
      if (!g.pointwise()) {
        col.resize(static_cast<std::size_t>(kdim) * out_plane);
        if (need_dx) dcol.resize(col.size());
      }
      for (int b = 0; b < g.n; ++b) {
        for (int grp = 0; grp < g.groups; ++grp) {
          const std::size_t in_off = (static_cast<std::size_t>(b) * g.cin + grp * g.cin_g()) * in_plane;
          const T* dout = go.data() + (static_cast<std::size_t>(b) * g.cout + grp * g.cout_g()) * out_plane;
          const T* wg = ws.data() + static_cast<std::size_t>(grp) * g.cout_g() * kdim;
          if (need_dw) {
            const T* colp = xs.data() + in_off;
            if (!g.pointwise()) {
              im2col(g, xs.data() + in_off, col.data());
              colp = col.data();
            }
            T* dwg = dw + static_cast<std::size_t>(grp) * g.cout_g() * kdim;
            detail::gemm(false, true, g.cout_g(), kdim, g.spatial_out(), T{1}, dout, g.spatial_out(), colp,
                         g.spatial_out(), T{1}, dwg, kdim);
          }
          if (need_dx) {
            if (g.pointwise()) {
              detail::gemm(true, false, kdim, g.spatial_out(), g.cout_g(), T{1}, wg, kdim, dout, g.spatial_out(),
                           T{1}, dx + in_off, g.spatial_out());
            } else {
              detail::gemm(true, false, kdim, g.spatial_out(), g.cout_g(), T{1}, wg, kdim, dout, g.spatial_out(),
                           T{0}, dcol.data(), g.spatial_out());
              col2im_add(g, dcol.data(), dx + in_off);
            }
          }
        }
      }
    });
  }
  return out;
}

#define CSFORMER_INSTANTIATE(T)                                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, Transpose, Transpose);              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);

CSFORMER_INSTANTIATE(float)
CSFORMER_INSTANTIATE(double)

#undef CSFORMER_INSTANTIATE

}  // namespace csformer
