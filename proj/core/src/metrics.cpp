#include "csformer/metrics.hpp"

#include <cmath>
#include <limits>

#include "csformer/error.hpp"

namespace csformer {
namespace {

void require_same(const ImageBuffer& a, const ImageBuffer& b) {
  if (!a.same_shape(b)) throw ShapeError("metric operands differ in shape");
}

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    total += k[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  for (double& v : k) v /= total;
  return k;
}

// Separable valid-mode filtering of one plane.
std::vector<double> filter_valid(const std::vector<double>& plane, int h, int w, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size()), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * plane[static_cast<std::size_t>(y) * w + x + i];
      rows[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[static_cast<std::size_t>(i)] * rows[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace

double psnr(const ImageBuffer& a, const ImageBuffer& b, double peak) {
  require_same(a, b);
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double mae(const ImageBuffer& a, const ImageBuffer& b) {
  require_same(a, b);
  double total = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) total += std::abs(static_cast<double>(a.pixels[i]) - b.pixels[i]);
  return total / static_cast<double>(a.pixels.size());
}

double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimOptions& o) {
  require_same(a, b);
  if (a.height < o.window || a.width < o.window) throw ShapeError("image is smaller than the SSIM window");
  const auto k = gaussian_kernel(o.window, o.sigma);
  const double c1 = (o.k1 * o.peak) * (o.k1 * o.peak), c2 = (o.k2 * o.peak) * (o.k2 * o.peak);
  const int h = a.height, w = a.width;
  double score = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    std::vector<double> x(a.plane()), y(a.plane()), xx(a.plane()), yy(a.plane()), xy(a.plane());
    for (std::size_t i = 0; i < a.plane(); ++i) {
      x[i] = a.pixels[c * a.plane() + i];
      y[i] = b.pixels[c * a.plane() + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter_valid(x, h, w, k), my = filter_valid(y, h, w, k);
    const auto sxx = filter_valid(xx, h, w, k), syy = filter_valid(yy, h, w, k), sxy = filter_valid(xy, h, w, k);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
      total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    score += total / static_cast<double>(mx.size());
  }
  return score / a.channels;
}

MetricsRecord evaluate_pair(const ImageBuffer& reference, const ImageBuffer& test) {
  return {psnr(reference, test), ssim(reference, test), mae(reference, test)};
}

}  // namespace csformer
