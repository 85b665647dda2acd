#pragma once

#include "csformer/image.hpp"

namespace csformer {

/// 10·log10(peak² / MSE) over all channels jointly; +∞ for identical images.
double psnr(const ImageBuffer& a, const ImageBuffer& b, double peak = 1.0);

/// Mean absolute error over all channels.
double mae(const ImageBuffer& a, const ImageBuffer& b);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 1.0;
};

/// Single-scale SSIM: Gaussian-weighted local statistics over every fully
/// contained window, averaged over positions and then over channels.
double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimOptions& options = {});

struct MetricsRecord {
  double psnr_db = 0.0;
  double ssim = 0.0;
  double mae = 0.0;
};

MetricsRecord evaluate_pair(const ImageBuffer& reference, const ImageBuffer& test);

}  // namespace csformer
