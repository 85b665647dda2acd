#include "csformer/padding.hpp"

#include <map>
#include <tuple>

#include "csformer/error.hpp"

namespace csformer {
namespace {

int round_up(int value, int multiple) { return (value + multiple - 1) / multiple * multiple; }
int ceil_div(int value, int divisor) { return (value + divisor - 1) / divisor; }

void check_window_dims(const Shape& s, int window, int shift) {
  if (s.size() != 4) throw ShapeError("window partition expects [N,C,H,W], got " + shape_to_string(s));
  if (window < 1 || s[2] % window != 0 || s[3] % window != 0) {
    throw ShapeError("spatial extents of " + shape_to_string(s) + " are not multiples of window " +
                     std::to_string(window));
  }
  if (shift < 0 || shift >= window) throw ShapeError("shift must lie in [0, window)");
}

using MapKey = std::tuple<int, int, int, int, int, int, bool>;

IndexMap cached(const MapKey& key, IndexMap (*build)(const Shape&, int, int)) {
  thread_local std::map<MapKey, IndexMap> cache;
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  if (cache.size() > 256) cache.clear();
  const auto& [n, c, h, w, window, shift, reverse] = key;
  IndexMap map = build(Shape{n, c, h, w}, window, shift);
  cache.emplace(key, map);
  return map;
}

IndexMap build_partition(const Shape& s, int window, int shift) {
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  const int nwy = h / window, nwx = w / window;
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(shape_numel(s)));
  for (int b = 0; b < n; ++b)
    for (int wy = 0; wy < nwy; ++wy)
      for (int wx = 0; wx < nwx; ++wx)
        for (int ch = 0; ch < c; ++ch)
          for (int ty = 0; ty < window; ++ty) {
            const int oy = (wy * window + ty + shift) % h;
            for (int tx = 0; tx < window; ++tx) {
              const int ox = (wx * window + tx + shift) % w;
              index->push_back(((static_cast<std::int64_t>(b) * c + ch) * h + oy) * w + ox);
            }
          }
  return IndexMap{{n * nwy * nwx, c, window, window}, std::move(index)};
}

IndexMap build_reverse(const Shape& s, int window, int shift) {
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  const int nwy = h / window, nwx = w / window;
  const std::int64_t area = static_cast<std::int64_t>(window) * window;
  auto index = std::make_shared<std::vector<std::int64_t>>();
  index->reserve(static_cast<std::size_t>(shape_numel(s)));
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y) {
        const int ry = (y - shift + h) % h;
        for (int x = 0; x < w; ++x) {
          const int rx = (x - shift + w) % w;
          const std::int64_t win = static_cast<std::int64_t>(b) * nwy * nwx + (ry / window) * nwx + rx / window;
          index->push_back((win * c + ch) * area + (ry % window) * window + rx % window);
        }
      }
  return IndexMap{s, std::move(index)};
}

}  // namespace

std::vector<std::uint8_t> PadPlan::validity_map(int l) const {
  const StageDims& d = level(l);
  std::vector<std::uint8_t> map(static_cast<std::size_t>(d.padded_h) * d.padded_w, 0);
  for (int y = 0; y < d.valid_h; ++y)
    for (int x = 0; x < d.valid_w; ++x) map[static_cast<std::size_t>(y) * d.padded_w + x] = 1;
  return map;
}

bool PadPlan::any_padding() const {
  for (const auto& d : levels)
    if (d.padded()) return true;
  return false;
}

PadPlan plan_padding(int h, int w, const ModelConfig& config) {
  if (h < 1 || w < 1) throw ShapeError("image extents must be positive");
  PadPlan plan;
  plan.input_h = h;
  plan.input_w = w;
  plan.window = config.window_size;
  for (int l = 0; l < kLevels; ++l) {
    StageDims& d = plan.levels[static_cast<std::size_t>(l)];
    d.valid_h = ceil_div(h, 1 << l);
    d.valid_w = ceil_div(w, 1 << l);
    plan.windowed[static_cast<std::size_t>(l)] = !config.global_attention[static_cast<std::size_t>(l)];
    // Every level that feeds a pixel-unshuffle needs even extents as well.
    const int multiple = plan.windowed[static_cast<std::size_t>(l)] ? config.window_size : (l < kLevels - 1 ? 2 : 1);
    d.padded_h = round_up(d.valid_h, multiple);
    d.padded_w = round_up(d.valid_w, multiple);
  }
  return plan;
}

PadPlan plan_input_padding(int h, int w, const ModelConfig& config) {
  if (h < 1 || w < 1) throw ShapeError("image extents must be positive");
  const int multiple = config.window_size << (kLevels - 1);
  PadPlan plan = plan_padding(h, w, config);
  const int ph = round_up(h, multiple), pw = round_up(w, multiple);
  for (int l = 0; l < kLevels; ++l) {
    plan.levels[static_cast<std::size_t>(l)].padded_h = ph >> l;
    plan.levels[static_cast<std::size_t>(l)].padded_w = pw >> l;
  }
  return plan;
}

AttentionMask build_pad_mask(const PadPlan& plan, int level, int shift) {
  const StageDims& d = plan.level(level);
  const int win = plan.window;
  if (d.padded_h % win != 0 || d.padded_w % win != 0) {
    throw ShapeError("level " + std::to_string(level) + " is not padded to a window multiple");
  }
  const int nwy = d.padded_h / win, nwx = d.padded_w / win, area = win * win;
  AttentionMask mask(nwy * nwx, area, area);
  std::vector<int> label(static_cast<std::size_t>(area));
  std::vector<std::uint8_t> valid(static_cast<std::size_t>(area));
  auto region = [&](int rolled, int extent) {
    if (shift == 0 || rolled < extent - win) return 0;
    return rolled < extent - shift ? 1 : 2;
  };
  for (int wy = 0; wy < nwy; ++wy)
    for (int wx = 0; wx < nwx; ++wx) {
      for (int t = 0; t < area; ++t) {
        const int ry = wy * win + t / win, rx = wx * win + t % win;
        const int oy = (ry + shift) % d.padded_h, ox = (rx + shift) % d.padded_w;
        label[t] = region(ry, d.padded_h) * 3 + region(rx, d.padded_w);
        valid[t] = oy < d.valid_h && ox < d.valid_w;
      }
      const int g = wy * nwx + wx;
      for (int i = 0; i < area; ++i) {
        bool any = false;
        for (int j = 0; j < area; ++j) {
          const bool keep = valid[i] && valid[j] && label[i] == label[j];
          mask.set(g, i, j, keep);
          any = any || keep;
        }
        if (!any) mask.set(g, i, i, true);
      }
    }
  return mask;
}

AttentionMask build_global_mask(const PadPlan& plan, int level) {
  const StageDims& d = plan.level(level);
  const int area = d.padded_h * d.padded_w;
  AttentionMask mask(1, area, area);
  for (int i = 0; i < area; ++i) {
    const bool vi = i / d.padded_w < d.valid_h && i % d.padded_w < d.valid_w;
    for (int j = 0; j < area; ++j) {
      const bool vj = j / d.padded_w < d.valid_h && j % d.padded_w < d.valid_w;
      mask.set(0, i, j, vi && vj);
    }
    if (!vi) mask.set(0, i, i, true);
  }
  return mask;
}

IndexMap window_partition_map(const Shape& x_shape, int window, int shift) {
  check_window_dims(x_shape, window, shift);
  return cached({x_shape[0], x_shape[1], x_shape[2], x_shape[3], window, shift, false}, build_partition);
}

IndexMap window_reverse_map(const Shape& x_shape, int window, int shift) {
  check_window_dims(x_shape, window, shift);
  return cached({x_shape[0], x_shape[1], x_shape[2], x_shape[3], window, shift, true}, build_reverse);
}

}  // namespace csformer
