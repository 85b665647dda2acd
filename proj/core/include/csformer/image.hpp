#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "csformer/tensor.hpp"

namespace csformer {

/// Planar float image, channel-major, nominally in [0, 1] (sRGB).
struct ImageBuffer {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<float> pixels;

  ImageBuffer() = default;
  ImageBuffer(int width, int height, int channels, float fill = 0.0f);

  std::size_t plane() const { return static_cast<std::size_t>(width) * height; }
  float& at(int c, int y, int x) { return pixels[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  float at(int c, int y, int x) const { return pixels[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  bool same_shape(const ImageBuffer& other) const;
};

/// Reads an 8-bit grey or RGB PNG (alpha is dropped, palettes expanded).
ImageBuffer load_png(const std::filesystem::path& path);
/// Writes 8-bit PNG, clipping to [0, 1] and rounding to the nearest level.
void save_png(const std::filesystem::path& path, const ImageBuffer& image);

/// PNG files directly inside `dir`, sorted by name. Throws IoError when the
/// directory does not exist.
std::vector<std::filesystem::path> list_png_files(const std::filesystem::path& dir);

std::uint8_t to_8bit(float v);

/// Values clipped to [0, 1].
ImageBuffer clipped(const ImageBuffer& image);
/// Top-left corner at (y, x).
ImageBuffer crop(const ImageBuffer& image, int y, int x, int height, int width);

/// Stacks equally sized images into [N, C, H, W].
Tensor32 to_batch(std::span<const ImageBuffer> images);
ImageBuffer from_batch(const Tensor32& batch, int index);

/// Additive white Gaussian noise with standard deviation sigma / 255. The
/// result is not clipped.
ImageBuffer degrade_awgn(const ImageBuffer& clean, double sigma, std::mt19937_64& rng);

struct RainParams {
  int count = 60;
  int length = 14;
  double angle_deg = 75.0;   // measured from the x axis
  double angle_jitter = 8.0;
  float intensity = 0.35f;
};

struct Streak {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

std::vector<Streak> sample_streaks(int height, int width, const RainParams& params, std::mt19937_64& rng);
/// Pixels of a one-pixel-wide segment, endpoints included, in drawing order.
std::vector<std::pair<int, int>> rasterize(const Streak& streak);
/// Adds `intensity` to every channel of the in-bounds streak pixels.
void draw_streak(ImageBuffer& image, const Streak& streak, float intensity);
/// Oriented bright streaks added on top of the clean image; not clipped.
ImageBuffer degrade_rain(const ImageBuffer& clean, const RainParams& params, std::mt19937_64& rng);

/// Procedural scene: colour gradient, filled shapes and striped texture.
ImageBuffer synth_scene(int height, int width, std::mt19937_64& rng);

}  // namespace csformer
