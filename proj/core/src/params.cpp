#include "csformer/params.hpp"

#include <cmath>
#include <random>

#include "csformer/error.hpp"

namespace csformer {
namespace {

enum class InitKind { kTruncNormal, kFanInUniform, kZero, kOne, kOutput };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind kind;
  int fan_in = 1;
};

class LayoutBuilder {
 public:
  explicit LayoutBuilder(const ModelConfig& c) : c_(c) {}

  std::vector<ParamSpec> build() {
    conv("embed", c_.base_channels, c_.in_channels, 3, InitKind::kFanInUniform);
    for (int stage = 0; stage < kStages; ++stage) {
      const int level = ModelConfig::stage_level(stage);
      if (stage > 4) {
        const int c = c_.width(level + 1);
        conv("up" + std::to_string(level), 2 * c, c, 1, InitKind::kFanInUniform);
        conv("fuse" + std::to_string(level), c_.width(level), 2 * c_.width(level), 1, InitKind::kFanInUniform);
      }
      for (int b = 0; b < c_.blocks_per_stage[stage]; ++b) block(block_prefix(stage, b), level);
      if (stage < 4) {
        const int c = c_.width(level);
        conv("down" + std::to_string(level), 2 * c, 4 * c, 1, InitKind::kFanInUniform);
      }
    }
    conv("output", c_.out_channels, c_.base_channels, 3, InitKind::kOutput);
    return std::move(specs_);
  }

 private:
  void conv(const std::string& name, int cout, int cin_g, int k, InitKind kind, bool bias = true) {
    specs_.push_back({name + ".weight", {cout, cin_g, k, k}, kind, cin_g * k * k});
    if (bias) specs_.push_back({name + ".bias", {cout}, kind == InitKind::kOutput ? InitKind::kOutput : InitKind::kZero});
  }

  void norm(const std::string& name, int d) {
    specs_.push_back({name + ".gamma", {d}, InitKind::kOne});
    specs_.push_back({name + ".beta", {d}, InitKind::kZero});
  }

  void block(const std::string& p, int level) {
    const int d = c_.width(level);
    const int h = c_.gcffn_hidden(level);
    norm(p + ".ln1", d);
    conv(p + ".ca.mlp", d / 2, d / 2, 1, InitKind::kTruncNormal);
    conv(p + ".ca.proj", d, d / 2, 1, InitKind::kTruncNormal);
    conv(p + ".attn.qkv", 3 * d, d, 1, InitKind::kTruncNormal);
    conv(p + ".attn.proj", d, d, 1, InitKind::kTruncNormal);
    if (c_.relative_position_bias && !c_.global_attention[level]) {
      const int span = 2 * c_.window_size - 1;
      specs_.push_back({p + ".attn.rel_bias", {span * span, c_.heads_per_level[level]}, InitKind::kTruncNormal});
    }
    norm(p + ".ln2", d);
    conv(p + ".ffn.pw1", h, d, 1, InitKind::kFanInUniform, c_.gcffn_bias);
    conv(p + ".ffn.dw1", h, 1, 3, InitKind::kFanInUniform, c_.gcffn_bias);
    conv(p + ".ffn.pw2", h, d, 1, InitKind::kFanInUniform, c_.gcffn_bias);
    conv(p + ".ffn.dw2", h, 1, 3, InitKind::kFanInUniform, c_.gcffn_bias);
    conv(p + ".ffn.pw3", d, h, 1, InitKind::kFanInUniform, c_.gcffn_bias);
  }

  const ModelConfig& c_;
  std::vector<ParamSpec> specs_;
};

}  // namespace

std::string block_prefix(int stage, int block) {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(block);
}

bool is_encoder_param(const std::string& name) {
  if (name.rfind("embed.", 0) == 0 || name.rfind("down", 0) == 0) return true;
  for (int s = 0; s <= 4; ++s)
    if (name.rfind("stage" + std::to_string(s) + ".", 0) == 0) return true;
  return false;
}

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  index_[name] = names_.size();
  names_.push_back(name);
  tensors_.push_back(std::move(value));
}

template <typename T>
const Tensor<T>& ParamStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter " + name);
  return tensors_[it->second];
}

template <typename T>
Tensor<T>& ParamStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("missing parameter " + name);
  return tensors_[it->second];
}

template <typename T>
Tensor<T> ParamStore<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? Tensor<T>{} : tensors_[it->second];
}

template <typename T>
std::int64_t ParamStore<T>::numel() const {
  std::int64_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

template <typename T>
void ParamStore<T>::set_requires_grad(bool value) {
  for (auto& t : tensors_) t.set_requires_grad(value);
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& t : tensors_) t.clear_grad();
}

template <typename T>
ParamStore<T> ParamStore<T>::clone() const {
  ParamStore out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    Tensor<T> copy = tensors_[i].detach();
    copy.set_requires_grad(tensors_[i].requires_grad());
    out.add(names_[i], copy);
  }
  return out;
}

template <typename T>
template <typename U>
ParamStore<U> ParamStore<T>::cast() const {
  ParamStore<U> out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    auto src = tensors_[i].data();
    out.add(names_[i], Tensor<U>(tensors_[i].shape(), std::vector<U>(src.begin(), src.end())));
  }
  return out;
}

template <typename T>
ParamStore<T> init_params(const ModelConfig& config, const InitOptions& options) {
  config.validate();
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  ParamStore<T> store;
  for (const ParamSpec& spec : LayoutBuilder(config).build()) {
    std::vector<T> values(static_cast<std::size_t>(shape_numel(spec.shape)), T{0});
    InitKind kind = spec.kind;
    if (kind == InitKind::kOutput) kind = options.zero_output ? InitKind::kZero : InitKind::kFanInUniform;
    switch (kind) {
      case InitKind::kTruncNormal:
        for (T& v : values) {
          double x;
          do x = normal(rng);
          while (std::abs(x) > 0.04);
          v = static_cast<T>(x);
        }
        break;
      case InitKind::kFanInUniform: {
        if (spec.shape.size() == 1) break;
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        std::uniform_real_distribution<double> uniform(-bound, bound);
        for (T& v : values) v = static_cast<T>(uniform(rng));
        break;
      }
      case InitKind::kOne:
        std::fill(values.begin(), values.end(), T{1});
        break;
      default:
        break;
    }
    store.add(spec.name, Tensor<T>::parameter(spec.shape, std::move(values)));
  }
  return store;
}

std::int64_t count_params(const ModelConfig& c) {
  c.validate();
  auto conv = [](std::int64_t cout, std::int64_t cin, std::int64_t k, bool bias) {
    return cout * cin * k * k + (bias ? cout : 0);
  };
  std::int64_t total = conv(c.base_channels, c.in_channels, 3, true) + conv(c.out_channels, c.base_channels, 3, true);
  for (int stage = 0; stage < kStages; ++stage) {
    const int level = ModelConfig::stage_level(stage);
    const std::int64_t d = c.width(level), h = c.gcffn_hidden(level);
    std::int64_t block = 4 * d;                                          // two LayerNorms
    block += conv(d / 2, d / 2, 1, true) + conv(d, d / 2, 1, true);      // channel attention
    block += conv(3 * d, d, 1, true) + conv(d, d, 1, true);              // qkv and output projections
    if (c.relative_position_bias && !c.global_attention[level]) {
      block += static_cast<std::int64_t>(2 * c.window_size - 1) * (2 * c.window_size - 1) * c.heads_per_level[level];
    }
    block += 2 * conv(h, d, 1, c.gcffn_bias) + 2 * conv(h, 1, 3, c.gcffn_bias) + conv(d, h, 1, c.gcffn_bias);
    total += block * c.blocks_per_stage[stage];
  }
  for (int level = 0; level < 4; ++level) {
    const std::int64_t c0 = c.width(level), c1 = c.width(level + 1);
    total += conv(2 * c0, 4 * c0, 1, true);  // downsample
    total += conv(2 * c1, c1, 1, true);      // upsample
    total += conv(c0, 2 * c0, 1, true);      // skip fusion
  }
  return total;
}

template class ParamStore<float>;
template class ParamStore<double>;
template ParamStore<float> init_params<float>(const ModelConfig&, const InitOptions&);
template ParamStore<double> init_params<double>(const ModelConfig&, const InitOptions&);
template ParamStore<double> ParamStore<float>::cast<double>() const;
template ParamStore<float> ParamStore<double>::cast<float>() const;
template ParamStore<float> ParamStore<float>::cast<float>() const;
template ParamStore<double> ParamStore<double>::cast<double>() const;

}  // namespace csformer
