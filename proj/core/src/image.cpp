#include "csformer/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "csformer/error.hpp"

namespace csformer {

ImageBuffer::ImageBuffer(int w, int h, int c, float fill)
    : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {
  if (w < 1 || h < 1 || (c != 1 && c != 3)) throw ShapeError("image needs positive extents and 1 or 3 channels");
}

bool ImageBuffer::same_shape(const ImageBuffer& other) const {
  return width == other.width && height == other.height && channels == other.channels;
}

std::uint8_t to_8bit(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::vector<std::filesystem::path> list_png_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  return files;
}

ImageBuffer load_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + png.message);
  }
  const bool grey = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = grey ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, raw.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IoError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  const int c = grey ? 1 : 3;
  ImageBuffer image(static_cast<int>(png.width), static_cast<int>(png.height), c);
  for (std::size_t p = 0; p < image.plane(); ++p)
    for (int ch = 0; ch < c; ++ch) image.pixels[ch * image.plane() + p] = raw[p * c + ch] / 255.0f;
  return image;
}

void save_png(const std::filesystem::path& path, const ImageBuffer& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> raw(image.pixels.size());
  const int c = image.channels;
  for (std::size_t p = 0; p < image.plane(); ++p)
    for (int ch = 0; ch < c; ++ch) raw[p * c + ch] = to_8bit(image.pixels[ch * image.plane() + p]);
  if (!png_image_write_to_file(&png, path.c_str(), 0, raw.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

ImageBuffer clipped(const ImageBuffer& image) {
  ImageBuffer out = image;
  for (float& v : out.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

ImageBuffer crop(const ImageBuffer& image, int y, int x, int height, int width) {
  if (y < 0 || x < 0 || y + height > image.height || x + width > image.width) {
    throw ShapeError("crop window exceeds the image");
  }
  ImageBuffer out(width, height, image.channels);
  for (int c = 0; c < image.channels; ++c)
    for (int r = 0; r < height; ++r)
      for (int q = 0; q < width; ++q) out.at(c, r, q) = image.at(c, y + r, x + q);
  return out;
}

Tensor32 to_batch(std::span<const ImageBuffer> images) {
  if (images.empty()) throw ShapeError("cannot batch zero images");
  const ImageBuffer& first = images.front();
  Tensor32 batch(Shape{static_cast<int>(images.size()), first.channels, first.height, first.width});
  auto dst = batch.mutable_data();
  std::size_t offset = 0;
  for (const ImageBuffer& im : images) {
    if (!im.same_shape(first)) throw ShapeError("batched images must share one shape");
    std::copy(im.pixels.begin(), im.pixels.end(), dst.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += im.pixels.size();
  }
  return batch;
}

ImageBuffer from_batch(const Tensor32& batch, int index) {
  if (batch.rank() != 4 || index < 0 || index >= batch.dim(0)) throw ShapeError("bad batch index");
  ImageBuffer out(batch.dim(3), batch.dim(2), batch.dim(1));
  auto src = batch.data().subspan(out.pixels.size() * static_cast<std::size_t>(index), out.pixels.size());
  std::copy(src.begin(), src.end(), out.pixels.begin());
  return out;
}

ImageBuffer degrade_awgn(const ImageBuffer& clean, double sigma, std::mt19937_64& rng) {
  ImageBuffer out = clean;
  if (sigma == 0.0) return out;
  std::normal_distribution<double> noise(0.0, sigma / 255.0);
  for (float& v : out.pixels) v = static_cast<float>(v + noise(rng));
  return out;
}

std::vector<Streak> sample_streaks(int height, int width, const RainParams& params, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> ys(0, height - 1), xs(0, width - 1);
  std::uniform_real_distribution<double> jitter(-params.angle_jitter, params.angle_jitter);
  std::uniform_real_distribution<double> stretch(0.6, 1.0);
  std::vector<Streak> streaks;
  for (int i = 0; i < params.count; ++i) {
    Streak s;
    s.x0 = xs(rng);
    s.y0 = ys(rng);
    const double angle = (params.angle_deg + jitter(rng)) * std::numbers::pi / 180.0;
    const double len = params.length * stretch(rng);
    s.x1 = s.x0 + static_cast<int>(std::lround(len * std::cos(angle)));
    s.y1 = s.y0 + static_cast<int>(std::lround(len * std::sin(angle)));
    streaks.push_back(s);
  }
  return streaks;
}

std::vector<std::pair<int, int>> rasterize(const Streak& s) {
  std::vector<std::pair<int, int>> pixels;
  const int dx = std::abs(s.x1 - s.x0), dy = -std::abs(s.y1 - s.y0);
  const int sx = s.x0 < s.x1 ? 1 : -1, sy = s.y0 < s.y1 ? 1 : -1;
  int err = dx + dy, x = s.x0, y = s.y0;
  while (true) {
    pixels.emplace_back(y, x);
    if (x == s.x1 && y == s.y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y += sy;
    }
  }
  return pixels;
}

void draw_streak(ImageBuffer& image, const Streak& streak, float intensity) {
  for (auto [y, x] : rasterize(streak)) {
    if (y < 0 || y >= image.height || x < 0 || x >= image.width) continue;
    for (int c = 0; c < image.channels; ++c) image.at(c, y, x) += intensity;
  }
}

ImageBuffer degrade_rain(const ImageBuffer& clean, const RainParams& params, std::mt19937_64& rng) {
  ImageBuffer out = clean;
  for (const Streak& s : sample_streaks(clean.height, clean.width, params, rng)) draw_streak(out, s, params.intensity);
  return out;
}

ImageBuffer synth_scene(int height, int width, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  auto colour = [&] { return std::array<float, 3>{unit(rng), unit(rng), unit(rng)}; };
  ImageBuffer image(width, height, 3);

  const auto top = colour(), bottom = colour();
  const float tilt = unit(rng) * 2.0f - 1.0f;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const float t = std::clamp((y + tilt * x) / static_cast<float>(height + width) + 0.25f, 0.0f, 1.0f);
      for (int c = 0; c < 3; ++c) image.at(c, y, x) = top[c] * (1.0f - t) + bottom[c] * t;
    }

  std::uniform_int_distribution<int> shape_count(3, 7);
  const int shapes = shape_count(rng);
  for (int s = 0; s < shapes; ++s) {
    const auto fill = colour();
    const float cy = unit(rng) * height, cx = unit(rng) * width;
    const float ry = (0.08f + 0.25f * unit(rng)) * height, rx = (0.08f + 0.25f * unit(rng)) * width;
    const bool ellipse = unit(rng) < 0.5f;
    const bool striped = unit(rng) < 0.3f;
    const float freq = 0.3f + 0.9f * unit(rng), phase = unit(rng) * 6.28f;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const float u = (y - cy) / ry, v = (x - cx) / rx;
        const bool inside = ellipse ? u * u + v * v <= 1.0f : std::abs(u) <= 1.0f && std::abs(v) <= 1.0f;
        if (!inside) continue;
        const float shade = striped ? 0.75f + 0.25f * std::sin(freq * (x + y) + phase) : 1.0f;
        for (int c = 0; c < 3; ++c) image.at(c, y, x) = fill[c] * shade;
      }
  }
  return image;
}

}  // namespace csformer
