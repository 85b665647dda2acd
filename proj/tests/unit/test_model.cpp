#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "csformer/checkpoint.hpp"
#include "csformer/grad_check.hpp"
#include "csformer/model.hpp"
#include "oracles/reference.hpp"
#include "test_support.hpp"

using namespace csformer;
using test_support::max_abs_diff;
using test_support::to_vector;

namespace {

template <typename T>
void randomize(ParamStore<T>& params, std::uint64_t seed, double amplitude = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-amplitude, amplitude);
  for (auto& t : params.tensors())
    for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void zero_all(ParamStore<T>& params) {
  for (auto& t : params.tensors())
    for (T& v : t.mutable_data()) v = T{0};
}

Tensor64 random_image(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor64(std::move(shape), oracle::random_values(n, seed, lo, hi));
}

ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::nano();
  c.base_channels = 4;
  c.heads_per_level = {1, 2, 2, 4, 4};
  return c;
}

// Per-token linear map of a [C,H,W] map by weight [Cout, Cin] and bias.
std::vector<double> token_linear(const std::vector<double>& x, int cin, int hw, const std::vector<double>& w,
                                 const std::vector<double>& b, int cout) {
  std::vector<double> y(static_cast<std::size_t>(cout) * hw);
  for (int o = 0; o < cout; ++o)
    for (int p = 0; p < hw; ++p) {
      double acc = b.empty() ? 0.0 : b[o];
      for (int i = 0; i < cin; ++i) acc += w[o * cin + i] * x[i * hw + p];
      y[o * hw + p] = acc;
    }
  return y;
}

// Shifted-window attention for one image [d,H,W] built by explicitly rolling
// the map, cutting windows, labelling cyclic-shift regions and rolling back.
std::vector<double> shifted_window_oracle(const std::vector<double>& x, int d, int h, int w, int heads, int win,
                                          int shift, const ParamStore<double>& p, const std::string& prefix) {
  const int hw = h * w;
  auto qkv = token_linear(x, d, hw, to_vector(p.at(prefix + ".qkv.weight")), to_vector(p.at(prefix + ".qkv.bias")),
                          3 * d);
  // rolled[y][x] = original[(y + shift) % h][(x + shift) % w]
  auto rolled_index = [&](int y, int xx) { return ((y + shift) % h) * w + (xx + shift) % w; };
  auto label = [&](int r, int extent) {
    if (shift == 0) return 0;
    if (r < extent - win) return 0;
    if (r < extent - shift) return 1;
    return 2;
  };
  std::vector<double> mixed(static_cast<std::size_t>(d) * hw, 0.0);
  for (int wy = 0; wy < h / win; ++wy)
    for (int wx = 0; wx < w / win; ++wx) {
      const int l = win * win;
      std::vector<double> q(static_cast<std::size_t>(l) * d), k(q.size()), v(q.size());
      std::vector<int> src(l), lab(l);
      for (int t = 0; t < l; ++t) {
        const int ry = wy * win + t / win, rx = wx * win + t % win;
        src[t] = rolled_index(ry, rx);
        lab[t] = label(ry, h) * 3 + label(rx, w);
        for (int c = 0; c < d; ++c) {
          q[t * d + c] = qkv[c * hw + src[t]];
          k[t * d + c] = qkv[(d + c) * hw + src[t]];
          v[t * d + c] = qkv[(2 * d + c) * hw + src[t]];
        }
      }
      auto out = oracle::dense_attention(q, k, v, l, d, heads, [&](int i, int j) { return lab[i] == lab[j]; });
      for (int t = 0; t < l; ++t)
        for (int c = 0; c < d; ++c) mixed[c * hw + src[t]] = out[t * d + c];
    }
  return token_linear(mixed, d, hw, to_vector(p.at(prefix + ".proj.weight")), to_vector(p.at(prefix + ".proj.bias")),
                      d);
}

ParamStore<double> attention_params(int d, std::uint64_t seed) {
  ParamStore<double> p;
  p.add("a.qkv.weight", Tensor64({3 * d, d, 1, 1}));
  p.add("a.qkv.bias", Tensor64({3 * d}));
  p.add("a.proj.weight", Tensor64({d, d, 1, 1}));
  p.add("a.proj.bias", Tensor64({d}));
  randomize(p, seed, 0.5);
  return p;
}

}  // namespace

TEST_CASE("config presets and validation") {
  CHECK(ModelConfig::nano().base_channels == 8);
  CHECK(ModelConfig::toy().blocks_per_stage[3] == 2);
  for (int l = 0; l < kLevels; ++l) CHECK(ModelConfig::nano().width(l) == 8 << l);
  for (int s = 0; s < kStages; ++s) CHECK(ModelConfig::stage_level(s) == ModelConfig::stage_level(8 - s));
  ModelConfig bad = ModelConfig::nano();
  bad.heads_per_level[2] = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(ModelConfig::preset("huge"), ConfigError);
  ModelConfig c = ModelConfig::toy();
  c.composition = AttnComposition::kSequential;
  c.relative_position_bias = true;
  CHECK(ModelConfig::from_json(c.to_json()) == c);
  CHECK_THROWS_AS(ModelConfig::from_json("{\"window_size\": 3}"), ConfigError);
}

TEST_CASE("parameter initialisation and counting") {
  const ModelConfig cfg = ModelConfig::nano();
  auto a = init_params<float>(cfg, {7});
  auto b = init_params<float>(cfg, {7});
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(to_vector(a.tensors()[i]) == to_vector(b.tensors()[i]));
  CHECK(a.numel() == count_params(cfg));
  for (double v : to_vector(a.at("output.weight"))) CHECK(v == 0.0);
  for (double v : to_vector(a.at("stage0.block0.attn.qkv.weight"))) CHECK(std::abs(v) <= 0.04);

  // Hand audit for C=4, one block per stage, expansion 2, in/out 3 channels.
  // Block of width d with hidden 2d: LN 4d, CA (d/2)²+d/2 + d²/2+d,
  // attention 3d²+3d + d²+d, GCFFN 2·(2d·d) + 2·(2d·9) + d·2d.
  auto block = [](long d) { return 4 * d + (d / 2) * (d / 2) + d / 2 + d * d / 2 + d + 4 * d * d + 4 * d + 6 * d * d + 36 * d; };
  const long blocks = 2 * (block(4) + block(8) + block(16) + block(32)) + block(64);
  const long resampling = (8 * 16 + 8) + (16 * 32 + 16) + (32 * 64 + 32) + (64 * 128 + 64)   // down
                          + (16 * 8 + 16) + (32 * 16 + 32) + (64 * 32 + 64) + (128 * 64 + 128);  // up
  const long fusion = (4 * 8 + 4) + (8 * 16 + 8) + (16 * 32 + 16) + (32 * 64 + 32);
  const long ends = (4 * 3 * 9 + 4) + (3 * 4 * 9 + 3);
  ModelConfig audit = ModelConfig::nano();
  audit.base_channels = 4;
  audit.heads_per_level = {1, 1, 1, 1, 1};
  CHECK(count_params(audit) == blocks + resampling + fusion + ends);
  CHECK(init_params<double>(audit).numel() == count_params(audit));

  ModelConfig doubled = cfg;
  doubled.base_channels = 16;
  const double ratio = static_cast<double>(count_params(doubled)) / static_cast<double>(count_params(cfg));
  CHECK(ratio > 3.6);
  CHECK(ratio < 4.1);

  ModelConfig rel = cfg;
  rel.relative_position_bias = true;
  CHECK(init_params<float>(rel).numel() == count_params(rel));
  CHECK(init_params<float>(rel).contains("stage1.block0.attn.rel_bias"));

  std::set<std::string> names(a.names().begin(), a.names().end());
  CHECK(names.size() == a.size());
  CHECK(is_encoder_param("stage4.block0.ln1.gamma"));
  CHECK(is_encoder_param("down3.weight"));
  CHECK_FALSE(is_encoder_param("stage5.block0.ln1.gamma"));
  CHECK_FALSE(is_encoder_param("up3.weight"));
  CHECK_FALSE(is_encoder_param("output.bias"));
}

TEST_CASE("shallow embedding") {
  auto p = init_params<double>(tiny_config());
  Tensor64 img = random_image({2, 3, 32, 32}, 1);
  CHECK(shallow_embed(img, p).shape() == Shape{2, 4, 32, 32});
  zero_all(p);
  for (double v : to_vector(shallow_embed(img, p))) CHECK(v == 0.0);
  p.at("embed.weight").mutable_data()[0 * 27 + 0 * 9 + 4] = 1.0;
  auto y = shallow_embed(img, p);
  for (int yy = 0; yy < 32; ++yy)
    for (int xx = 0; xx < 32; ++xx) CHECK(y.at({1, 0, yy, xx}) == img.at({1, 0, yy, xx}));
}

TEST_CASE("channel attention") {
  const int d = 4;
  ParamStore<double> p;
  p.add("ca.mlp.weight", Tensor64({2, 2, 1, 1}));
  p.add("ca.mlp.bias", Tensor64({2}, std::vector<double>{1.0, 1.0}));
  p.add("ca.proj.weight", Tensor64({d, 2, 1, 1}, std::vector<double>{1, 0, 0, 1, 1, 0, 0, 1}));
  p.add("ca.proj.bias", Tensor64({d}));
  Tensor64 x = random_image({1, d, 2, 2}, 2);
  // MLP output is all ones: the branch reduces to the projected gate.
  auto y = to_vector(channel_attention(x, p, "ca"));
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i) {
      const double gate = x.data()[c * 4 + i] * x.data()[(c + 2) * 4 + i];
      CHECK(y[c * 4 + i] == doctest::Approx(gate));
      CHECK(y[(c + 2) * 4 + i] == doctest::Approx(gate));
    }

  Tensor64 constant({1, 2, 3, 3});
  for (int i = 0; i < 9; ++i) constant.mutable_data()[i] = 0.25, constant.mutable_data()[9 + i] = -1.5;
  auto pooled = to_vector(global_avg_pool(constant));
  CHECK(pooled == std::vector<double>{0.25, -1.5});

  randomize(p, 3);
  auto w_mlp = to_vector(p.at("ca.mlp.weight")), b_mlp = to_vector(p.at("ca.mlp.bias"));
  auto w_proj = to_vector(p.at("ca.proj.weight")), b_proj = to_vector(p.at("ca.proj.bias"));
  auto xs = to_vector(x);
  std::vector<double> gate(8), avg(2, 0.0), scaleby(2), scaled(8);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i) gate[c * 4 + i] = xs[c * 4 + i] * xs[(c + 2) * 4 + i];
  for (int c = 0; c < 2; ++c) avg[c] = (gate[c * 4] + gate[c * 4 + 1] + gate[c * 4 + 2] + gate[c * 4 + 3]) / 4.0;
  for (int o = 0; o < 2; ++o) scaleby[o] = b_mlp[o] + w_mlp[o * 2] * avg[0] + w_mlp[o * 2 + 1] * avg[1];
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i) scaled[c * 4 + i] = gate[c * 4 + i] * scaleby[c];
  auto ref = token_linear(scaled, 2, 4, w_proj, b_proj, d);
  CHECK(max_abs_diff(to_vector(channel_attention(x, p, "ca")), ref) <= 1e-6);
  CHECK_THROWS_AS(channel_attention(random_image({1, 3, 2, 2}, 4), p, "ca"), ShapeError);
}

TEST_CASE("window attention limits and locality") {
  const int d = 4;
  ParamStore<double> p;
  std::vector<double> qkv(3 * d * d, 0.0), proj(d * d, 0.0);
  for (int c = 0; c < d; ++c) qkv[(2 * d + c) * d + c] = 1.0, proj[c * d + c] = 1.0;
  p.add("a.qkv.weight", Tensor64({3 * d, d, 1, 1}, qkv));
  p.add("a.qkv.bias", Tensor64({3 * d}));
  p.add("a.proj.weight", Tensor64({d, d, 1, 1}, proj));
  p.add("a.proj.bias", Tensor64({d}));
  Tensor64 x = random_image({1, d, 8, 8}, 5);
  auto y = to_vector(window_msa(x, p, "a", 1, 8, 0));
  for (int c = 0; c < d; ++c) {
    double m = 0.0;
    for (int i = 0; i < 64; ++i) m += x.data()[c * 64 + i];
    m /= 64.0;
    for (int i = 0; i < 64; ++i) CHECK(y[c * 64 + i] == doctest::Approx(m).epsilon(1e-12));
  }

  auto g = to_vector(global_msa(random_image({1, d, 2, 2}, 6), p, "a", 2));
  auto gx = random_image({1, d, 2, 2}, 6);
  for (int c = 0; c < d; ++c) {
    const double m = (gx.data()[c * 4] + gx.data()[c * 4 + 1] + gx.data()[c * 4 + 2] + gx.data()[c * 4 + 3]) / 4.0;
    for (int i = 0; i < 4; ++i) CHECK(g[c * 4 + i] == doctest::Approx(m).epsilon(1e-12));
  }

  auto rp = attention_params(d, 7);
  Tensor64 big = random_image({1, d, 16, 16}, 8);
  auto before = to_vector(window_msa(big, rp, "a", 2, 8, 0));
  Tensor64 edited = big.detach();
  for (int c = 0; c < d; ++c)
    for (int yy = 8; yy < 16; ++yy)
      for (int xx = 0; xx < 8; ++xx) edited.mutable_data()[(c * 16 + yy) * 16 + xx] = 0.0;
  auto after = to_vector(window_msa(edited, rp, "a", 2, 8, 0));
  int changed_inside = 0;
  for (int c = 0; c < d; ++c)
    for (int yy = 0; yy < 16; ++yy)
      for (int xx = 0; xx < 16; ++xx) {
        const std::size_t i = (c * 16 + yy) * 16 + xx;
        if (yy >= 8 && xx < 8) {
          changed_inside += before[i] != after[i];
        } else {
          CHECK(before[i] == after[i]);
        }
      }
  CHECK(changed_inside > 0);
  CHECK_THROWS_AS(window_msa(random_image({1, d, 12, 16}, 1), rp, "a", 2, 8, 0), ShapeError);
  CHECK_THROWS_AS(window_msa(big, rp, "a", 3, 8, 0), ShapeError);
}

TEST_CASE("shifted window attention matches the explicit-window oracle") {
  const int d = 4;
  const ForwardContext ctx(plan_padding(16, 16, tiny_config()), tiny_config());
  for (std::uint64_t seed = 10; seed < 13; ++seed) {
    auto p = attention_params(d, seed);
    Tensor64 x = random_image({2, d, 16, 16}, seed + 50);
    for (int shift : {0, 4}) {
      const AttentionMask* mask = shift ? &*ctx.levels[0].shifted_mask : nullptr;
      auto got = to_vector(window_msa(x, p, "a", 2, 8, shift, mask));
      for (int b = 0; b < 2; ++b) {
        std::vector<double> img(x.data().begin() + b * d * 256, x.data().begin() + (b + 1) * d * 256);
        auto ref = shifted_window_oracle(img, d, 16, 16, 2, 8, shift, p, "a");
        std::vector<double> part(got.begin() + b * d * 256, got.begin() + (b + 1) * d * 256);
        CHECK(max_abs_diff(part, ref) <= 1e-6);
      }
    }
  }
}

TEST_CASE("global attention") {
  const int d = 4;
  auto p = attention_params(d, 20);
  Tensor64 one = random_image({1, d, 1, 1}, 21);
  auto qkv = token_linear(to_vector(one), d, 1, to_vector(p.at("a.qkv.weight")), to_vector(p.at("a.qkv.bias")), 3 * d);
  std::vector<double> v(qkv.begin() + 2 * d, qkv.end());
  auto ref = token_linear(v, d, 1, to_vector(p.at("a.proj.weight")), to_vector(p.at("a.proj.bias")), d);
  CHECK(max_abs_diff(to_vector(global_msa(one, p, "a", 2)), ref) <= 1e-12);

  Tensor64 x = random_image({1, d, 2, 2}, 22);
  auto xs = to_vector(x);
  auto qkv4 = token_linear(xs, d, 4, to_vector(p.at("a.qkv.weight")), to_vector(p.at("a.qkv.bias")), 3 * d);
  std::vector<double> q(16), k(16), vv(16);
  for (int t = 0; t < 4; ++t)
    for (int c = 0; c < d; ++c) {
      q[t * d + c] = qkv4[c * 4 + t];
      k[t * d + c] = qkv4[(d + c) * 4 + t];
      vv[t * d + c] = qkv4[(2 * d + c) * 4 + t];
    }
  auto mixed_tokens = oracle::dense_attention(q, k, vv, 4, d, 2, [](int, int) { return true; });
  std::vector<double> mixed(16);
  for (int t = 0; t < 4; ++t)
    for (int c = 0; c < d; ++c) mixed[c * 4 + t] = mixed_tokens[t * d + c];
  auto ref4 = token_linear(mixed, d, 4, to_vector(p.at("a.proj.weight")), to_vector(p.at("a.proj.bias")), d);
  CHECK(max_abs_diff(to_vector(global_msa(x, p, "a", 2)), ref4) <= 1e-6);
}

TEST_CASE("gated feed-forward network") {
  const int d = 4, h = 8;
  ParamStore<double> p;
  p.add("f.pw1.weight", Tensor64({h, d, 1, 1}));
  p.add("f.dw1.weight", Tensor64({h, 1, 3, 3}));
  p.add("f.pw2.weight", Tensor64({h, d, 1, 1}));
  p.add("f.dw2.weight", Tensor64({h, 1, 3, 3}));
  p.add("f.pw3.weight", Tensor64({d, h, 1, 1}));
  randomize(p, 30);
  for (double v : to_vector(gcffn(Tensor64({1, d, 4, 4}), p, "f"))) CHECK(v == 0.0);

  Tensor64 x = random_image({1, d, 4, 4}, 31);
  auto xs = to_vector(x);
  auto conv = [&](const std::vector<double>& in, int cin, const std::string& name, int cout, int k, int groups) {
    return oracle::conv2d(in, 1, cin, 4, 4, to_vector(p.at(name)), cout, k, k, nullptr, 1, k / 2, groups);
  };
  auto x1 = conv(conv(xs, d, "f.pw1.weight", h, 1, 1), h, "f.dw1.weight", h, 3, h);
  auto x2 = conv(conv(xs, d, "f.pw2.weight", h, 1, 1), h, "f.dw2.weight", h, 3, h);
  std::vector<double> gated(x1.size());
  for (std::size_t i = 0; i < gated.size(); ++i) gated[i] = oracle::gelu(x1[i]) * x2[i];
  auto ref = conv(gated, h, "f.pw3.weight", d, 1, 1);
  CHECK(max_abs_diff(to_vector(gcffn(x, p, "f")), ref) <= 1e-6);

  // Identity point-wise maps and centre-tap depth-wise kernels collapse the
  // network to Wp3(gelu(x) ⊙ x).
  ParamStore<double> q;
  std::vector<double> eye(h * d, 0.0), centre(h * 9, 0.0);
  for (int c = 0; c < d; ++c) eye[c * d + c] = 1.0;
  for (int c = 0; c < h; ++c) centre[c * 9 + 4] = 1.0;
  q.add("f.pw1.weight", Tensor64({h, d, 1, 1}, eye));
  q.add("f.dw1.weight", Tensor64({h, 1, 3, 3}, centre));
  q.add("f.pw2.weight", Tensor64({h, d, 1, 1}, eye));
  q.add("f.dw2.weight", Tensor64({h, 1, 3, 3}, centre));
  q.add("f.pw3.weight", p.at("f.pw3.weight"));
  std::vector<double> collapsed(static_cast<std::size_t>(h) * 16, 0.0);
  for (int i = 0; i < d * 16; ++i) collapsed[i] = oracle::gelu(xs[i]) * xs[i];
  CHECK(max_abs_diff(to_vector(gcffn(x, q, "f")), conv(collapsed, h, "f.pw3.weight", d, 1, 1)) <= 1e-12);
}

TEST_CASE("zero-weight block is the identity") {
  const ModelConfig cfg = tiny_config();
  auto p = init_params<double>(cfg);
  zero_all(p);
  const ForwardContext ctx(plan_padding(16, 16, cfg), cfg);
  Tensor64 x = random_image({1, 4, 16, 16}, 40);
  for (AttnKind kind : {AttnKind::kWindow, AttnKind::kShifted, AttnKind::kGlobal}) {
    auto y = csformer_block(x, p, "stage0.block0", cfg, 0, kind, ctx.levels[0]);
    CHECK(y.shape() == x.shape());
    CHECK(to_vector(y) == to_vector(x));
  }
}

TEST_CASE("block gradients") {
  ModelConfig cfg = tiny_config();
  cfg.blocks_per_stage.fill(2);
  auto p = init_params<double>(cfg);
  randomize(p, 41);
  const ForwardContext ctx(plan_padding(12, 12, cfg), cfg);
  for (int b = 0; b < 2; ++b) {
    auto kind = block_attn_kind(cfg, 0, b);
    auto report = grad_check(
        [&](const Tensor64& x) { return csformer_block(x, p, block_prefix(0, b), cfg, 0, kind, ctx.levels[0]); },
        random_image({1, 4, 16, 16}, 42 + b), {.max_coords = 48});
    CHECK(report.pass);
  }
}

TEST_CASE("resampling and skip fusion") {
  const ModelConfig cfg = ModelConfig::nano();
  auto p = init_params<double>(cfg);
  const PadPlan plan = plan_padding(64, 64, cfg);
  Tensor64 x = random_image({1, 8, 64, 64}, 50);
  std::vector<Shape> trace{x.shape()};
  Tensor64 t = x;
  for (int l = 0; l < 4; ++l) {
    t = downsample(t, p, l, plan.level(l + 1));
    trace.push_back(t.shape());
  }
  CHECK(trace == std::vector<Shape>{{1, 8, 64, 64}, {1, 16, 32, 32}, {1, 32, 16, 16}, {1, 64, 8, 8}, {1, 128, 4, 4}});
  CHECK(upsample(downsample(x, p, 0, plan.level(1)), p, 0, plan.level(0)).shape() == x.shape());

  // Two complementary channel selections of the unshuffled map recover x.
  const int c = 8;
  auto select = [&](int offset) {
    ParamStore<double> s;
    std::vector<double> w(static_cast<std::size_t>(2 * c) * 4 * c, 0.0);
    for (int o = 0; o < 2 * c; ++o) w[static_cast<std::size_t>(o) * 4 * c + offset + o] = 1.0;
    s.add("down0.weight", Tensor64({2 * c, 4 * c, 1, 1}, w));
    s.add("down0.bias", Tensor64({2 * c}));
    return downsample(x, s, 0, plan.level(1));
  };
  auto rebuilt = to_vector(pixel_shuffle(concat_channels(select(0), select(2 * c)), 2));
  CHECK(rebuilt == to_vector(x));

  ParamStore<double> f;
  std::vector<double> left(c * 2 * c, 0.0), right(c * 2 * c, 0.0);
  for (int i = 0; i < c; ++i) left[i * 2 * c + i] = 1.0, right[i * 2 * c + c + i] = 1.0;
  Tensor64 dec = random_image({1, c, 4, 4}, 51), enc = random_image({1, c, 4, 4}, 52);
  f.add("fuse0.weight", Tensor64({c, 2 * c, 1, 1}, left));
  f.add("fuse0.bias", Tensor64({c}));
  CHECK(to_vector(skip_fuse(dec, enc, f, 0)) == to_vector(dec));
  f.at("fuse0.weight") = Tensor64({c, 2 * c, 1, 1}, right);
  CHECK(to_vector(skip_fuse(dec, enc, f, 0)) == to_vector(enc));
  randomize(f, 53);
  std::vector<double> stacked = to_vector(dec);
  auto es = to_vector(enc);
  stacked.insert(stacked.end(), es.begin(), es.end());
  auto ref = token_linear(stacked, 2 * c, 16, to_vector(f.at("fuse0.weight")), to_vector(f.at("fuse0.bias")), c);
  CHECK(max_abs_diff(to_vector(skip_fuse(dec, enc, f, 0)), ref) <= 1e-12);
  CHECK_THROWS_AS(skip_fuse(dec, random_image({1, c, 4, 2}, 1), f, 0), ShapeError);
  CHECK_THROWS_AS(downsample(random_image({1, 8, 5, 4}, 1), p, 0, plan.level(1)), ShapeError);
}

TEST_CASE("model forward") {
  const ModelConfig cfg = ModelConfig::nano();
  auto p = init_params<float>(cfg, {3});
  Tensor32 img(Shape{2, 3, 64, 64});
  auto vals = oracle::random_values(static_cast<std::size_t>(img.numel()), 60, 0.0, 1.0);
  std::copy(vals.begin(), vals.end(), img.mutable_data().begin());
  auto out = model_forward(img, p, cfg);
  CHECK(to_vector(out.restored) == to_vector(img));
  CHECK(out.latent.shape() == Shape{2, 128, 4, 4});
  CHECK(out.residual.shape() == img.shape());

  for (auto [h, w] : {std::pair{17, 23}, std::pair{40, 9}}) {
    Tensor32 odd(Shape{1, 3, h, w}, 0.25f);
    CHECK(model_forward(odd, p, cfg).restored.shape() == odd.shape());
  }

  ModelConfig pre = cfg;
  pre.pretrain_mode = true;
  auto zero = p.clone();
  zero_all(zero);
  for (double v : to_vector(model_forward(img, zero, pre).restored)) CHECK(v == 0.0);
  CHECK_THROWS_AS(model_forward(Tensor32(Shape{1, 4, 16, 16}), p, cfg), ShapeError);
}

TEST_CASE("full-model gradients") {
  ModelConfig cfg = ModelConfig::nano();
  auto p = init_params<double>(cfg, {4, false});
  randomize(p, 70, 0.2);
  Tensor64 img = random_image({1, 3, 16, 16}, 71, 0.0, 1.0);
  Tensor64 target = random_image({1, 3, 16, 16}, 72, 0.0, 1.0);
  std::mt19937_64 rng(73);
  std::vector<std::string> picks;
  for (int i = 0; i < 5; ++i) picks.push_back(p.names()[rng() % p.size()]);
  std::vector<Tensor64> chosen;
  for (const auto& n : picks) chosen.push_back(p.at(n));
  auto loss = [&] {
    auto r = model_forward(img, p, cfg).restored;
    return mean(mul(sub(r, target), sub(r, target)));
  };
  auto report = grad_check_params(loss, chosen, {.eps = 1e-3, .max_coords = 8});
  INFO("max rel err " << report.max_rel_err << " max abs err " << report.max_abs_err);
  CHECK(report.pass);
  CHECK(grad_check([&](const Tensor64& x) { return model_forward(x, p, cfg).restored; }, img, {.max_coords = 24}).pass);
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig cfg = ModelConfig::nano();
  auto p = init_params<float>(cfg, {5, false});
  const auto dir = std::filesystem::temp_directory_path() / "csformer_unit_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.cskpt";
  save_model(path, p, cfg);
  CHECK(load_model_config(path) == cfg);
  auto q = init_params<float>(cfg, {6, false});
  auto report = load_params(Archive::load(path), q);
  CHECK(report.loaded.size() == p.size());
  CHECK(report.missing.empty());
  CHECK(report.unused.empty());
  Tensor32 img(Shape{1, 3, 32, 32}, 0.3f);
  CHECK(to_vector(model_forward(img, p, cfg).restored) == to_vector(model_forward(img, q, cfg).restored));

  Archive partial;
  ParamStore<float> enc;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (is_encoder_param(p.names()[i])) enc.add(p.names()[i], p.tensors()[i]);
  add_params(partial, enc);
  partial.add({"head.weight", {2}, std::vector<float>{1.0f, 2.0f}});
  auto fresh = init_params<float>(cfg, {9, false});
  auto r2 = load_params(partial, fresh);
  CHECK(r2.loaded.size() == enc.size());
  CHECK(r2.missing.size() == p.size() - enc.size());
  CHECK(r2.unused == std::vector<std::string>{"head.weight"});

  {
    std::ofstream bad(dir / "bad.cskpt", std::ios::binary);
    bad << "NOPE!";
  }
  CHECK_THROWS_AS(Archive::load(dir / "bad.cskpt"), CheckpointError);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK_THROWS_AS(Archive::load(path), CheckpointError);
  std::filesystem::remove_all(dir);
}
