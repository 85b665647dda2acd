#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "csformer/image.hpp"
#include "csformer/metrics.hpp"
#include "csformer/ops.hpp"
#include "oracles/reference.hpp"

using namespace csformer;

namespace {

ImageBuffer random_image(int h, int w, int c, std::uint64_t seed) {
  ImageBuffer im(w, h, c);
  auto vals = oracle::random_values(im.pixels.size(), seed, 0.0, 1.0);
  std::copy(vals.begin(), vals.end(), im.pixels.begin());
  return im;
}

ImageBuffer flipped(const ImageBuffer& im) {
  ImageBuffer out = im;
  for (int c = 0; c < im.channels; ++c)
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) out.at(c, y, x) = im.at(c, y, im.width - 1 - x);
  return out;
}

// Direct SSIM: explicit 11×11 Gaussian window at every valid position.
double ssim_oracle(const ImageBuffer& a, const ImageBuffer& b) {
  const int n = 11;
  double g[11][11], total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) total += g[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double score = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    double acc = 0.0;
    int count = 0;
    for (int y = 0; y + n <= a.height; ++y)
      for (int x = 0; x + n <= a.width; ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j) {
            const double w = g[i][j] / total, p = a.at(c, y + i, x + j), q = b.at(c, y + i, x + j);
            mx += w * p;
            my += w * q;
            sxx += w * p * p;
            syy += w * q * q;
            sxy += w * p * q;
          }
        const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
        acc += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    score += acc / count;
  }
  return score / a.channels;
}

}  // namespace

TEST_CASE("gaussian noise") {
  std::mt19937_64 rng(1);
  ImageBuffer grey(256, 256, 3, 0.5f);
  CHECK(degrade_awgn(grey, 0.0, rng).pixels == grey.pixels);
  for (double sigma : {15.0, 25.0, 50.0}) {
    ImageBuffer noisy = degrade_awgn(grey, sigma, rng);
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < noisy.pixels.size(); ++i) {
      const double d = noisy.pixels[i] - 0.5;
      sum += d;
      sq += d * d;
    }
    const double n = static_cast<double>(noisy.pixels.size());
    const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
    CHECK(std::abs(sd - sigma / 255.0) <= 0.02 * sigma / 255.0);
    CHECK(psnr(grey, noisy) == doctest::Approx(20.0 * std::log10(255.0 / sigma)).epsilon(0.3 / 30.0));
  }
  std::mt19937_64 r1(7), r2(7);
  CHECK(degrade_awgn(grey, 25.0, r1).pixels == degrade_awgn(grey, 25.0, r2).pixels);
}

TEST_CASE("rain streaks") {
  std::mt19937_64 rng(2);
  ImageBuffer clean = random_image(48, 48, 3, 3);
  RainParams none;
  none.count = 0;
  CHECK(degrade_rain(clean, none, rng).pixels == clean.pixels);

  RainParams bright;
  bright.intensity = 1.0f;
  ImageBuffer rainy = degrade_rain(clean, bright, rng);
  int brighter = 0;
  for (std::size_t i = 0; i < clean.pixels.size(); ++i) {
    CHECK(rainy.pixels[i] >= clean.pixels[i]);
    brighter += rainy.pixels[i] > clean.pixels[i];
  }
  CHECK(brighter > 0);

  for (Streak s : {Streak{5, 5, 9, 30}, Streak{40, 3, 2, 10}, Streak{10, 10, 10, 20}, Streak{3, 20, 25, 20}}) {
    ImageBuffer canvas(48, 48, 1, 0.25f);
    draw_streak(canvas, s, 0.5f);
    const int dx = s.x1 - s.x0, dy = s.y1 - s.y0;
    int lit = 0;
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 48; ++x) {
        if (canvas.at(0, y, x) == 0.25f) continue;
        ++lit;
        CHECK(canvas.at(0, y, x) == 0.75f);
        // Every lit pixel lies within half a pixel of the segment along the minor axis.
        if (std::abs(dx) >= std::abs(dy)) {
          const double t = dx == 0 ? 0.0 : static_cast<double>(x - s.x0) / dx;
          CHECK(std::abs(s.y0 + t * dy - y) <= 0.5 + 1e-9);
        } else {
          const double t = static_cast<double>(y - s.y0) / dy;
          CHECK(std::abs(s.x0 + t * dx - x) <= 0.5 + 1e-9);
        }
      }
    CHECK(lit == std::max(std::abs(dx), std::abs(dy)) + 1);
  }
}

TEST_CASE("psnr and mae") {
  ImageBuffer a = random_image(16, 16, 3, 4);
  ImageBuffer b = a;
  for (float& v : b.pixels) v += 1.0f / 255.0f;
  CHECK(psnr(a, b) == doctest::Approx(48.1308).epsilon(0.01 / 48.13));
  CHECK(std::abs(psnr(a, b) - 48.13) <= 0.01);
  ImageBuffer black(8, 8, 1, 0.0f), white(8, 8, 1, 1.0f);
  CHECK(psnr(black, white) == 0.0);
  CHECK(psnr(a, a) == std::numeric_limits<double>::infinity());
  ImageBuffer c = random_image(16, 16, 3, 5);
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    se += std::pow(static_cast<double>(a.pixels[i]) - c.pixels[i], 2);
    ae += std::abs(static_cast<double>(a.pixels[i]) - c.pixels[i]);
  }
  const double n = static_cast<double>(a.pixels.size());
  CHECK(psnr(a, c) == doctest::Approx(10.0 * std::log10(n / se)).epsilon(1e-12));
  CHECK(psnr(a, c) == psnr(c, a));
  CHECK(mae(a, c) == doctest::Approx(ae / n).epsilon(1e-12));
  CHECK(mae(a, c) == mae(c, a));
  CHECK(psnr(flipped(a), flipped(c)) == doctest::Approx(psnr(a, c)).epsilon(1e-12));
  CHECK_THROWS_AS(psnr(a, black), ShapeError);
}

TEST_CASE("ssim") {
  ImageBuffer a = random_image(32, 32, 3, 6), b = random_image(32, 32, 3, 7);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(ssim(a, b) - ssim_oracle(a, b)) <= 1e-6);
  CHECK(std::abs(ssim(a, b) - ssim(b, a)) <= 1e-9);
  CHECK(ssim(flipped(a), flipped(b)) == doctest::Approx(ssim(a, b)).epsilon(1e-9));
  ImageBuffer half(32, 32, 1, 0.0f);
  for (int y = 0; y < 32; ++y)
    for (int x = 16; x < 32; ++x) half.at(0, y, x) = 1.0f;
  ImageBuffer inverted = half;
  for (float& v : inverted.pixels) v = 1.0f - v;
  const double s = ssim(half, inverted);
  CHECK(s < 0.0);
  CHECK(std::abs(s - ssim_oracle(half, inverted)) <= 1e-6);
  CHECK(s >= -1.0);
  CHECK_THROWS_AS(ssim(ImageBuffer(8, 8, 1), ImageBuffer(8, 8, 1)), ShapeError);
}

TEST_CASE("image buffers and png") {
  const auto dir = std::filesystem::temp_directory_path() / "csformer_png";
  std::filesystem::create_directories(dir);
  ImageBuffer rgb(13, 7, 3);
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) rgb.pixels[i] = static_cast<float>((i * 37) % 256) / 255.0f;
  save_png(dir / "rgb.png", rgb);
  ImageBuffer back = load_png(dir / "rgb.png");
  REQUIRE(back.same_shape(rgb));
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) CHECK(to_8bit(back.pixels[i]) == to_8bit(rgb.pixels[i]));
  save_png(dir / "again.png", back);
  CHECK(load_png(dir / "again.png").pixels == back.pixels);

  ImageBuffer grey = random_image(9, 5, 1, 8);
  save_png(dir / "grey.png", grey);
  ImageBuffer g = load_png(dir / "grey.png");
  CHECK(g.channels == 1);
  for (std::size_t i = 0; i < grey.pixels.size(); ++i) CHECK(std::abs(g.pixels[i] - grey.pixels[i]) <= 0.5f / 255.0f + 1e-6f);
  CHECK_THROWS_AS(load_png(dir / "absent.png"), IoError);

  ImageBuffer over(2, 1, 1);
  over.pixels = {-0.5f, 1.7f};
  CHECK(clipped(over).pixels == std::vector<float>{0.0f, 1.0f});
  CHECK(to_8bit(1.7f) == 255);

  ImageBuffer big = random_image(10, 12, 3, 9);
  ImageBuffer part = crop(big, 2, 3, 4, 5);
  CHECK(part.at(1, 0, 0) == big.at(1, 2, 3));
  CHECK(part.at(2, 3, 4) == big.at(2, 5, 7));
  CHECK_THROWS_AS(crop(big, 8, 0, 4, 4), ShapeError);
  std::vector<ImageBuffer> items{big, random_image(10, 12, 3, 10)};
  Tensor32 batch = to_batch(items);
  CHECK(batch.shape() == Shape{2, 3, 10, 12});
  CHECK(from_batch(batch, 1).pixels == items[1].pixels);

  Tensor32 t(Shape{1, 2, 4, 6});
  for (int i = 0; i < 48; ++i) t.mutable_data()[i] = static_cast<float>(i);
  auto round_trip = pixel_shuffle(pixel_unshuffle(t, 2), 2);
  CHECK(std::vector<float>(round_trip.data().begin(), round_trip.data().end()) ==
        std::vector<float>(t.data().begin(), t.data().end()));

  std::mt19937_64 rng(3);
  ImageBuffer scene = synth_scene(40, 30, rng);
  CHECK(scene.height == 40);
  CHECK(scene.width == 30);
  for (float v : scene.pixels) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  std::filesystem::remove_all(dir);
}
