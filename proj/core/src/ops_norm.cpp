#include <algorithm>
#include <cmath>
#include <numbers>

#include "csformer/ops.hpp"
#include "op_support.hpp"

namespace csformer {

using detail::require;

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  require(x.rank() == 4, "layer_norm: expects [N,C,H,W], got " + shape_to_string(x.shape()));
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c}, "layer_norm: gamma/beta must have shape [C]");

  Tensor<T> out(x.shape());
  // Per-token statistics, kept for the backward pass.
  auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * hw);
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * hw);
  {
    auto xs = x.data();
    auto o = out.mutable_data();
    auto gs = gamma.data(), bs = beta.data();
    std::vector<T> acc(static_cast<std::size_t>(hw));
    for (int b = 0; b < n; ++b) {
      const T* xb = xs.data() + static_cast<std::size_t>(b) * c * hw;
      T* mu = mean->data() + static_cast<std::size_t>(b) * hw;
      T* rs = rstd->data() + static_cast<std::size_t>(b) * hw;
      std::fill(acc.begin(), acc.end(), T{0});
      for (int ch = 0; ch < c; ++ch) {
        const T* row = xb + static_cast<std::size_t>(ch) * hw;
        for (int p = 0; p < hw; ++p) acc[p] += row[p];
      }
      for (int p = 0; p < hw; ++p) mu[p] = acc[p] / static_cast<T>(c);
      std::fill(acc.begin(), acc.end(), T{0});
      for (int ch = 0; ch < c; ++ch) {
        const T* row = xb + static_cast<std::size_t>(ch) * hw;
        for (int p = 0; p < hw; ++p) {
          const T d = row[p] - mu[p];
          acc[p] += d * d;
        }
      }
      for (int p = 0; p < hw; ++p) rs[p] = T{1} / std::sqrt(acc[p] / static_cast<T>(c) + static_cast<T>(eps));
      T* ob = o.data() + static_cast<std::size_t>(b) * c * hw;
      for (int ch = 0; ch < c; ++ch) {
        const T* row = xb + static_cast<std::size_t>(ch) * hw;
        T* orow = ob + static_cast<std::size_t>(ch) * hw;
        const T gch = gs[ch], bch = bs[ch];
        for (int p = 0; p < hw; ++p) orow[p] = (row[p] - mu[p]) * rs[p] * gch + bch;
      }
    }
  }
  detail::check_finite(out, "layer_norm");

  if (auto* tape = recording_tape({&x, &gamma, &beta})) {
    tape->record(out, [x, gamma, beta, mean, rstd, n, c, hw](const Tensor<T>& out) mutable {
      auto go = out.grad();
      auto xs = x.data();
      auto gs = gamma.data();
      T* dgamma = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
      T* dbeta = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
      T* dx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
      std::vector<T> sum_dxhat(static_cast<std::size_t>(hw));
      std::vector<T> sum_dxhat_xhat(static_cast<std::size_t>(hw));
      for (int b = 0; b < n; ++b) {
        const std::size_t base = static_cast<std::size_t>(b) * c * hw;
        const T* mu = mean->data() + static_cast<std::size_t>(b) * hw;
        const T* rs = rstd->data() + static_cast<std::size_t>(b) * hw;
        std::fill(sum_dxhat.begin(), sum_dxhat.end(), T{0});
        std::fill(sum_dxhat_xhat.begin(), sum_dxhat_xhat.end(), T{0});
        for (int ch = 0; ch < c; ++ch) {
          const T* row = xs.data() + base + static_cast<std::size_t>(ch) * hw;
          const T* grow = go.data() + base + static_cast<std::size_t>(ch) * hw;
          T dg{0}, db{0};
          for (int p = 0; p < hw; ++p) {
            const T xhat = (row[p] - mu[p]) * rs[p];
            const T dxhat = grow[p] * gs[ch];
            sum_dxhat[p] += dxhat;
            sum_dxhat_xhat[p] += dxhat * xhat;
            dg += grow[p] * xhat;
            db += grow[p];
          }
          if (dgamma) dgamma[ch] += dg;
          if (dbeta) dbeta[ch] += db;
        }
        if (!dx) continue;
        const T inv_c = T{1} / static_cast<T>(c);
        for (int ch = 0; ch < c; ++ch) {
          const T* row = xs.data() + base + static_cast<std::size_t>(ch) * hw;
          const T* grow = go.data() + base + static_cast<std::size_t>(ch) * hw;
          T* drow = dx + base + static_cast<std::size_t>(ch) * hw;
          for (int p = 0; p < hw; ++p) {
            const T xhat = (row[p] - mu[p]) * rs[p];
            const T dxhat = grow[p] * gs[ch];
            drow[p] += rs[p] * (dxhat - inv_c * sum_dxhat[p] - xhat * inv_c * sum_dxhat_xhat[p]);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xs = x.data();
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = T{0.5} * xs[i] * (T{1} + std::erf(xs[i] * inv_sqrt2));
  detail::check_finite(out, "gelu");
  if (auto* tape = recording_tape({&x})) {
    tape->record(out, [x, inv_sqrt2](const Tensor<T>& out) mutable {
      auto go = out.grad();
      auto xs = x.data();
      auto g = x.grad_buffer();
      const T inv_sqrt_2pi = static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xs[i];
        const T cdf = T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * v * v);
        g[i] += go[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

AttentionMask::AttentionMask(int count_, int rows_, int cols_, float fill)
    : count(count_), rows(rows_), cols(cols_),
      additive(static_cast<std::size_t>(count_) * rows_ * cols_, fill) {}

std::int64_t AttentionMask::excluded_count() const {
  return std::count_if(additive.begin(), additive.end(), [](float v) { return v != kKeep; });
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const AttentionMask* mask, int mask_stride) {
  require(logits.rank() >= 2, "masked_softmax: logits need at least two axes");
  const int rows = logits.dim(-2), cols = logits.dim(-1);
  const std::int64_t batch = logits.numel() / (static_cast<std::int64_t>(rows) * cols);
  if (mask != nullptr) {
    require(mask->rows == rows && mask->cols == cols && mask->count > 0,
            "masked_softmax: mask extents do not match logits " + shape_to_string(logits.shape()));
    require(mask_stride >= 1, "masked_softmax: mask_stride must be positive");
  }
  Tensor<T> out(logits.shape());
  {
    auto o = out.mutable_data();
    auto xs = logits.data();
    for (std::int64_t b = 0; b < batch; ++b) {
      const float* m = nullptr;
      if (mask != nullptr) {
        const std::int64_t group = (b / mask_stride) % mask->count;
        m = mask->additive.data() + static_cast<std::size_t>(group) * rows * cols;
      }
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = (static_cast<std::size_t>(b) * rows + r) * cols;
        const T* in = xs.data() + off;
        T* dst = o.data() + off;
        const float* mrow = m ? m + static_cast<std::size_t>(r) * cols : nullptr;
        T peak = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < cols; ++j) {
          if (mrow && mrow[j] != AttentionMask::kKeep) continue;
          peak = std::max(peak, in[j]);
        }
        if (peak == -std::numeric_limits<T>::infinity()) {
          throw Error("masked_softmax: row " + std::to_string(r) + " has every entry excluded");
        }
        T total{0};
        for (int j = 0; j < cols; ++j) {
          if (mrow && mrow[j] != AttentionMask::kKeep) {
            dst[j] = T{0};
            continue;
          }
          dst[j] = std::exp(in[j] - peak);
          total += dst[j];
        }
        const T inv = T{1} / total;
        for (int j = 0; j < cols; ++j) dst[j] *= inv;
      }
    }
  }
  detail::check_finite(out, "masked_softmax");
  if (auto* tape = recording_tape({&logits})) {
    tape->record(out, [logits, batch, rows, cols](const Tensor<T>& out) mutable {
      auto go = out.grad();
      auto y = out.data();
      auto g = logits.grad_buffer();
      const std::int64_t total_rows = batch * rows;
      for (std::int64_t r = 0; r < total_rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * cols;
        T dot{0};
        for (int j = 0; j < cols; ++j) dot += go[off + j] * y[off + j];
        for (int j = 0; j < cols; ++j) g[off + j] += y[off + j] * (go[off + j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x, std::optional<std::pair<int, int>> valid) {
  require(x.rank() == 4, "global_avg_pool: expects [N,C,H,W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h >= 1 && w >= 1, "global_avg_pool: empty spatial extent");
  const int vh = valid ? valid->first : h;
  const int vw = valid ? valid->second : w;
  require(vh >= 1 && vw >= 1 && vh <= h && vw <= w, "global_avg_pool: valid region outside the map");
  const T inv = T{1} / static_cast<T>(static_cast<std::int64_t>(vh) * vw);
  Tensor<T> out(Shape{n, c, 1, 1});
  {
    auto xs = x.data();
    auto o = out.mutable_data();
    for (int p = 0; p < n * c; ++p) {
      const T* plane = xs.data() + static_cast<std::size_t>(p) * h * w;
      T acc{0};
      for (int y = 0; y < vh; ++y) {
        for (int xx = 0; xx < vw; ++xx) acc += plane[static_cast<std::size_t>(y) * w + xx];
      }
      o[p] = acc * inv;
    }
  }
  detail::check_finite(out, "global_avg_pool");
  if (auto* tape = recording_tape({&x})) {
    tape->record(out, [x, n, c, h, w, vh, vw, inv](const Tensor<T>& out) mutable {
      auto go = out.grad();
      auto g = x.grad_buffer();
      for (int p = 0; p < n * c; ++p) {
        T* plane = g.data() + static_cast<std::size_t>(p) * h * w;
        const T share = go[p] * inv;
        for (int y = 0; y < vh; ++y) {
          for (int xx = 0; xx < vw; ++xx) plane[static_cast<std::size_t>(y) * w + xx] += share;
        }
      }
    });
  }
  return out;
}

#define CSFORMER_INSTANTIATE(T)                                                                      \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);      \
  template Tensor<T> gelu(const Tensor<T>&);                                                         \
  template Tensor<T> masked_softmax(const Tensor<T>&, const AttentionMask*, int);                    \
  template Tensor<T> global_avg_pool(const Tensor<T>&, std::optional<std::pair<int, int>>);

CSFORMER_INSTANTIATE(float)
CSFORMER_INSTANTIATE(double)

#undef CSFORMER_INSTANTIATE

}  // namespace csformer
