#include <doctest.h>

#include <random>

#include "csformer/inference.hpp"
#include "csformer/model.hpp"
#include "oracles/reference.hpp"
#include "test_support.hpp"

using namespace csformer;
using test_support::max_abs_diff;
using test_support::to_vector;

namespace {

template <typename T>
void randomize(ParamStore<T>& params, std::uint64_t seed, double amplitude) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-amplitude, amplitude);
  for (auto& t : params.tensors())
    for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  auto vals = oracle::random_values(static_cast<std::size_t>(shape_numel(shape)), seed, lo, hi);
  return Tensor<T>(std::move(shape), std::vector<T>(vals.begin(), vals.end()));
}

// Halves the extent level by level and pads windowed levels to the window.
std::array<std::array<int, 4>, kLevels> simulate_plan(int h, int w, int window) {
  std::array<std::array<int, 4>, kLevels> dims{};
  int vh = h, vw = w;
  for (int l = 0; l < kLevels; ++l) {
    if (l > 0) {
      vh = (vh + 1) / 2;
      vw = (vw + 1) / 2;
    }
    int ph = vh, pw = vw;
    if (l < kLevels - 1) {
      while (ph % window) ++ph;
      while (pw % window) ++pw;
    }
    dims[static_cast<std::size_t>(l)] = {vh, vw, ph, pw};
  }
  return dims;
}

// Rolled coordinate of an original coordinate after a roll by -shift.
int rolled(int y, int shift, int extent) { return ((y - shift) % extent + extent) % extent; }

int region(int r, int shift, int window, int extent) {
  if (shift == 0) return 0;
  if (r < extent - window) return 0;
  if (r < extent - shift) return 1;
  return 2;
}

// Whether two original positions (y, x) may attend to each other.
bool pair_allowed(std::array<int, 2> a, std::array<int, 2> b, int valid_h, int valid_w, int ph, int pw, int window,
                  int shift) {
  for (auto p : {a, b})
    if (p[0] >= valid_h || p[1] >= valid_w) return false;
  const int ray = rolled(a[0], shift, ph), rax = rolled(a[1], shift, pw);
  const int rby = rolled(b[0], shift, ph), rbx = rolled(b[1], shift, pw);
  if (ray / window != rby / window || rax / window != rbx / window) return false;
  return region(ray, shift, window, ph) == region(rby, shift, window, ph) &&
         region(rax, shift, window, pw) == region(rbx, shift, window, pw);
}

}  // namespace

TEST_CASE("feature padding plan") {
  const ModelConfig cfg = ModelConfig::toy();
  const PadPlan small = plan_padding(16, 16, cfg);
  const std::array<int, kLevels> expected{16, 8, 8, 8, 1};
  for (int l = 0; l < kLevels; ++l) {
    CHECK(small.level(l).padded_h == expected[static_cast<std::size_t>(l)]);
    CHECK(small.level(l).padded_w == expected[static_cast<std::size_t>(l)]);
  }
  CHECK_FALSE(plan_padding(128, 128, cfg).any_padding());
  CHECK_FALSE(plan_padding(256, 384, cfg).any_padding());
  CHECK(plan_padding(17, 23, cfg).any_padding());

  for (auto [h, w] : {std::pair{17, 23}, std::pair{1, 1}, std::pair{100, 100}, std::pair{160, 33}, std::pair{9, 64}}) {
    const PadPlan plan = plan_padding(h, w, cfg);
    const auto sim = simulate_plan(h, w, cfg.window_size);
    for (int l = 0; l < kLevels; ++l) {
      const StageDims& d = plan.level(l);
      CHECK(std::array<int, 4>{d.valid_h, d.valid_w, d.padded_h, d.padded_w} == sim[static_cast<std::size_t>(l)]);
      auto map = plan.validity_map(l);
      REQUIRE(map.size() == static_cast<std::size_t>(d.padded_h) * d.padded_w);
      for (int y = 0; y < d.padded_h; ++y)
        for (int x = 0; x < d.padded_w; ++x)
          CHECK(map[static_cast<std::size_t>(y) * d.padded_w + x] == (y < d.valid_h && x < d.valid_w));
    }
    const PadPlan again = plan_padding(plan.level(0).padded_h, plan.level(0).padded_w, cfg);
    CHECK_FALSE(again.level(0).padded());
    CHECK(again.level(0).padded_h == plan.level(0).padded_h);
    CHECK(plan_padding(h, w, cfg).levels == plan.levels);
  }

  const PadPlan input = plan_input_padding(16, 16, cfg);
  const std::array<int, kLevels> input_dims{128, 64, 32, 16, 8};
  for (int l = 0; l < kLevels; ++l) CHECK(input.level(l).padded_h == input_dims[static_cast<std::size_t>(l)]);
  CHECK_THROWS_AS(plan_padding(0, 5, cfg), ShapeError);
}

TEST_CASE("window partition") {
  Tensor64 x = random_tensor<double>({2, 3, 16, 16}, 1);
  for (int shift : {0, 4}) {
    Tensor64 windows = window_partition(x, 8, shift);
    CHECK(windows.shape() == Shape{8, 3, 8, 8});
    CHECK(to_vector(window_reverse(windows, x.shape(), 8, shift)) == to_vector(x));
    for (int n = 0; n < 2; ++n)
      for (int wy = 0; wy < 2; ++wy)
        for (int wx = 0; wx < 2; ++wx)
          for (int c = 0; c < 3; ++c)
            for (int i = 0; i < 8; ++i)
              for (int j = 0; j < 8; ++j) {
                const int sy = (wy * 8 + i + shift) % 16, sx = (wx * 8 + j + shift) % 16;
                CHECK(windows.at({n * 4 + wy * 2 + wx, c, i, j}) == x.at({n, c, sy, sx}));
              }
  }
  CHECK_THROWS_AS(window_partition(random_tensor<double>({1, 1, 12, 16}, 2), 8), ShapeError);
}

TEST_CASE("padding masks") {
  const ModelConfig cfg = ModelConfig::nano();
  const PadPlan clean = plan_padding(16, 16, cfg);
  CHECK(build_pad_mask(clean, 0, 0).excluded_count() == 0);

  const PadPlan one_column = plan_padding(8, 7, cfg);
  const AttentionMask m = build_pad_mask(one_column, 0, 0);
  REQUIRE(m.count == 1);
  for (int q = 0; q < 64; ++q) {
    int excluded = 0;
    for (int k = 0; k < 64; ++k) excluded += !m.keeps(0, q, k);
    if (q % 8 != 7) CHECK(excluded == 8);
  }
  Tensor64 logits = random_tensor<double>({1, 64, 64}, 3);
  auto probs = to_vector(masked_softmax(logits, &m));
  for (int q = 0; q < 64; ++q)
    for (int k = 0; k < 64; ++k)
      if (!m.keeps(0, q, k)) CHECK(probs[static_cast<std::size_t>(q) * 64 + k] == 0.0);

  const PadPlan plan = plan_padding(12, 12, cfg);
  REQUIRE(plan.level(0).padded_h == 16);
  for (int shift : {0, 4}) {
    const AttentionMask mask = build_pad_mask(plan, 0, shift);
    REQUIRE(mask.count == 4);
    for (int ay = 0; ay < 16; ++ay)
      for (int ax = 0; ax < 16; ++ax)
        for (int by = 0; by < 16; ++by)
          for (int bx = 0; bx < 16; ++bx) {
            const int ry = rolled(ay, shift, 16), rx = rolled(ax, shift, 16);
            const int sy = rolled(by, shift, 16), sx = rolled(bx, shift, 16);
            if (ry / 8 != sy / 8 || rx / 8 != sx / 8) continue;
            const int group = (ry / 8) * 2 + rx / 8;
            const int row = (ry % 8) * 8 + rx % 8, col = (sy % 8) * 8 + sx % 8;
            // Pad queries have nothing to attend to and keep only themselves.
            const bool a_valid = ay < 12 && ax < 12;
            const bool expected = a_valid ? pair_allowed({ay, ax}, {by, bx}, 12, 12, 16, 16, 8, shift) : row == col;
            CHECK(mask.keeps(group, row, col) == expected);
          }
  }

  const AttentionMask global = build_global_mask(plan_padding(16, 16, cfg), 4);
  CHECK(global.count == 1);
  CHECK(global.excluded_count() == 0);
}

TEST_CASE("pad region never reaches valid attention outputs") {
  const ModelConfig cfg = ModelConfig::nano();
  const PadPlan plan = plan_padding(12, 13, cfg);
  const ForwardContext ctx(plan, cfg);
  ParamStore<double> p;
  p.add("a.qkv.weight", random_tensor<double>({24, 8, 1, 1}, 4));
  p.add("a.qkv.bias", random_tensor<double>({24}, 5));
  p.add("a.proj.weight", random_tensor<double>({8, 8, 1, 1}, 6));
  p.add("a.proj.bias", random_tensor<double>({8}, 7));
  Tensor64 x = random_tensor<double>({1, 8, 16, 16}, 8);
  Tensor64 noisy = x.detach();
  std::mt19937_64 rng(9);
  std::normal_distribution<double> big(0.0, 50.0);
  for (int c = 0; c < 8; ++c)
    for (int y = 0; y < 16; ++y)
      for (int xx = 0; xx < 16; ++xx)
        if (y >= 12 || xx >= 13) noisy.mutable_data()[(c * 16 + y) * 16 + xx] = big(rng);
  for (int shift : {0, 4}) {
    const AttentionMask* mask = shift ? &*ctx.levels[0].shifted_mask : &*ctx.levels[0].window_mask;
    auto a = window_msa(x, p, "a", 2, 8, shift, mask);
    auto b = window_msa(noisy, p, "a", 2, 8, shift, mask);
    for (int c = 0; c < 8; ++c)
      for (int y = 0; y < 12; ++y)
        for (int xx = 0; xx < 13; ++xx) CHECK(a.at({0, c, y, xx}) == doctest::Approx(b.at({0, c, y, xx})).epsilon(1e-12));
  }
}

TEST_CASE("feature padding matches input padding") {
  ModelConfig cfg = ModelConfig::toy();
  auto p = init_params<float>(cfg, {11, false});
  randomize(p, 12, 0.15);

  Tensor32 full = random_tensor<float>({1, 3, 128, 128}, 13, 0.0, 1.0);
  const auto a = to_vector(infer_full_image(full, p, cfg));
  CHECK(a == to_vector(infer_input_padded(full, p, cfg)));
  CHECK(a == to_vector(infer_input_padded(full, p, cfg, Baseline::kUnmasked)));

  for (auto [h, w] : {std::pair{100, 100}, std::pair{16, 16}, std::pair{37, 5}}) {
    Tensor32 img = random_tensor<float>({1, 3, h, w}, 14 + h, 0.0, 1.0);
    auto feature = infer_full_image(img, p, cfg);
    CHECK(feature.shape() == img.shape());
    const double diff = max_abs_diff(to_vector(feature), to_vector(infer_input_padded(img, p, cfg)));
    INFO(h << "x" << w << " diff " << diff);
    CHECK(diff <= 1e-5);
    CHECK(infer_input_padded(img, p, cfg, Baseline::kUnmasked).shape() == img.shape());
  }
}

TEST_CASE("multiply-accumulate accounting") {
  CHECK(conv_macs(8, 4, 1, 1, 1, 10, 10) == 3200);
  {
    MacTally tally;
    conv2d(Tensor32(Shape{1, 4, 10, 10}), Tensor32(Shape{8, 4, 1, 1}), Tensor32{});
    CHECK(tally.total() == 3200);
  }
  const ModelConfig toy = ModelConfig::toy();
  const MacReport small = count_macs(toy, 16, 16);
  CHECK(small.padded.total() < small.baseline.total());
  const MacReport exact = count_macs(toy, 128, 128);
  CHECK(exact.padded.total() == exact.baseline.total());

  for (ModelConfig cfg : {ModelConfig::nano(), ModelConfig::toy()}) {
    for (auto [h, w] : {std::pair{64, 64}, std::pair{17, 23}}) {
      auto p = init_params<float>(cfg);
      const PadPlan plan = plan_padding(h, w, cfg);
      MacTally tally;
      model_forward(Tensor32(Shape{1, 3, h, w}, 0.5f), p, cfg, &plan);
      const MacBreakdown counted = count_plan_macs(cfg, plan);
      CHECK(tally.totals() == counted.classes);
      std::int64_t by_level = 0;
      for (auto v : counted.per_level) by_level += v;
      CHECK(by_level == counted.total());
      CHECK(counted.total() == counted.conv() + counted.attention());
    }
  }

  ModelConfig seq = ModelConfig::nano();
  seq.composition = AttnComposition::kSequential;
  seq.global_attention = {false, false, false, true, true};
  auto p = init_params<float>(seq);
  const PadPlan plan = plan_padding(40, 24, seq);
  MacTally tally;
  model_forward(Tensor32(Shape{2, 3, 40, 24}, 0.5f), p, seq, &plan);
  MacTotals doubled = count_plan_macs(seq, plan).classes;
  for (auto& v : doubled) v *= 2;
  CHECK(tally.totals() == doubled);

  std::mt19937 rng(5);
  for (int i = 0; i < 40; ++i) {
    const int h = 1 + static_cast<int>(rng() % 160), w = 1 + static_cast<int>(rng() % 160);
    const MacReport r = count_macs(toy, h, w);
    if (h % 128 == 0 && w % 128 == 0) {
      CHECK(r.padded.total() == r.baseline.total());
    } else {
      CHECK(r.padded.total() < r.baseline.total());
    }
  }
}
