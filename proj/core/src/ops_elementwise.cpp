#include <cmath>

#include "csformer/ops.hpp"
#include "op_support.hpp"

namespace csformer {

using detail::require;

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  detail::check_finite(out, "add");
  if (auto* tape = recording_tape({&a, &b})) {
    tape->record(out, [a, b](const Tensor<T>& out) mutable {
      if (a.requires_grad()) a.accumulate_grad(out.grad());
      if (b.requires_grad()) b.accumulate_grad(out.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  detail::check_finite(out, "sub");
  if (auto* tape = recording_tape({&a, &b})) {
    tape->record(out, [a, b](const Tensor<T>& out) mutable {
      if (a.requires_grad()) a.accumulate_grad(out.grad());
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        auto go = out.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  detail::check_finite(out, "mul");
  if (auto* tape = recording_tape({&a, &b})) {
    tape->record(out, [a, b](const Tensor<T>& out) mutable {
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.grad_buffer();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * y[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * x[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  detail::check_finite(out, "scale");
  if (auto* tape = recording_tape({&a})) {
    tape->record(out, [a, factor](const Tensor<T>& out) mutable {
      auto g = a.grad_buffer();
      auto go = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + value;
  detail::check_finite(out, "add_scalar");
  if (auto* tape = recording_tape({&a})) {
    tape->record(out, [a](const Tensor<T>& out) mutable { a.accumulate_grad(out.grad()); });
  }
  return out;
}

template <typename T>
Tensor<T> square_root(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    if (x[i] < T{0}) throw Error("square_root of a negative value");
    o[i] = std::sqrt(x[i]);
  }
  detail::check_finite(out, "square_root");
  if (auto* tape = recording_tape({&a})) {
    tape->record(out, [a](const Tensor<T>& out) mutable {
      auto g = a.grad_buffer();
      auto go = out.grad();
      auto y = out.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] / (T{2} * y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> channel_mul(const Tensor<T>& x, const Tensor<T>& gate) {
  require(x.rank() == 4 && gate.rank() == 4, "channel_mul: expects rank-4 operands");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require(gate.dim(1) == c && gate.dim(2) == 1 && gate.dim(3) == 1 && (gate.dim(0) == n || gate.dim(0) == 1),
          "channel_mul: gate " + shape_to_string(gate.shape()) + " does not broadcast over " +
              shape_to_string(x.shape()));
  const bool shared = gate.dim(0) == 1;
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto xs = x.data();
  auto gs = gate.data();
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T s = gs[static_cast<std::size_t>((shared ? 0 : b) * c + ch)];
      const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (int p = 0; p < hw; ++p) o[base + p] = xs[base + p] * s;
    }
  }
  detail::check_finite(out, "channel_mul");
  if (auto* tape = recording_tape({&x, &gate})) {
    tape->record(out, [x, gate, n, c, hw, shared](const Tensor<T>& out) mutable {
      auto go = out.grad();
      if (x.requires_grad()) {
        auto g = x.grad_buffer();
        auto gs = gate.data();
        for (int b = 0; b < n; ++b) {
          for (int ch = 0; ch < c; ++ch) {
            const T s = gs[static_cast<std::size_t>((shared ? 0 : b) * c + ch)];
            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
            for (int p = 0; p < hw; ++p) g[base + p] += go[base + p] * s;
          }
        }
      }
      if (gate.requires_grad()) {
        auto g = gate.grad_buffer();
        auto xs = x.data();
        for (int b = 0; b < n; ++b) {
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * hw;
            T acc{0};
            for (int p = 0; p < hw; ++p) acc += go[base + p] * xs[base + p];
            g[static_cast<std::size_t>((shared ? 0 : b) * c + ch)] += acc;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_periodic(const Tensor<T>& a, const Tensor<T>& b) {
  const auto period = static_cast<std::size_t>(b.numel());
  require(period > 0 && a.numel() % b.numel() == 0,
          "add_periodic: " + shape_to_string(b.shape()) + " does not tile " + shape_to_string(a.shape()));
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i % period];
  if (auto* tape = recording_tape({&a, &b})) {
    tape->record(out, [a, b, period](const Tensor<T>& out) mutable {
      auto go = out.grad();
      if (a.requires_grad()) a.accumulate_grad(go);
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) g[i % period] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (auto* tape = recording_tape({&a})) {
    tape->record(out, [a](const Tensor<T>& out) mutable {
      const T g0 = out.grad()[0];
      for (T& g : a.grad_buffer()) g += g0;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  auto x = a.data();
  require(!x.empty(), "mean of an empty tensor");
  const double origin = static_cast<double>(x[0]);
  double acc = 0.0;
  for (T v : x) acc += static_cast<double>(v) - origin;
  const auto n = static_cast<double>(x.size());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(origin + acc / n));
  if (auto* tape = recording_tape({&a})) {
    tape->record(out, [a, n](const Tensor<T>& out) mutable {
      const T g0 = static_cast<T>(static_cast<double>(out.grad()[0]) / n);
      for (T& g : a.grad_buffer()) g += g0;
    });
  }
  return out;
}

#define CSFORMER_INSTANTIATE(T)                                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> scale(const Tensor<T>&, T);                               \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                          \
  template Tensor<T> square_root(const Tensor<T>&);                            \
  template Tensor<T> channel_mul(const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> add_periodic(const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> sum(const Tensor<T>&);                                    \
  template Tensor<T> mean(const Tensor<T>&);

CSFORMER_INSTANTIATE(float)
CSFORMER_INSTANTIATE(double)

#undef CSFORMER_INSTANTIATE

}  // namespace csformer
