#include "csformer/config.hpp"

#include <cmath>
#include <json.hpp>

#include "csformer/error.hpp"

namespace csformer {

using nlohmann::json;

void ModelConfig::validate() const {
  if (base_channels < 2 || base_channels % 2 != 0) throw ConfigError("base_channels must be a positive even number");
  if (in_channels < 1 || out_channels < 1) throw ConfigError("channel counts must be positive");
  if (out_channels > in_channels) throw ConfigError("out_channels may not exceed in_channels (residual skip)");
  if (window_size < 2 || window_size % 2 != 0) throw ConfigError("window_size must be an even number >= 2");
  if (!(gcffn_expansion > 0.0)) throw ConfigError("gcffn_expansion must be positive");
  for (int b : blocks_per_stage)
    if (b < 0) throw ConfigError("blocks_per_stage entries must be non-negative");
  for (int level = 0; level < kLevels; ++level) {
    const int heads = heads_per_level[level];
    if (heads < 1 || width(level) % heads != 0) {
      throw ConfigError("heads_per_level[" + std::to_string(level) + "] = " + std::to_string(heads) +
                        " does not divide width " + std::to_string(width(level)));
    }
    if (gcffn_hidden(level) < 1) throw ConfigError("gcffn hidden width rounds to zero");
  }
}

int ModelConfig::gcffn_hidden(int level) const {
  return static_cast<int>(std::lround(gcffn_expansion * width(level)));
}

ModelConfig ModelConfig::nano() {
  ModelConfig c;
  c.name = "nano";
  c.base_channels = 8;
  c.blocks_per_stage.fill(1);
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.name = "toy";
  c.base_channels = 16;
  c.blocks_per_stage.fill(2);
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "nano") return nano();
  if (name == "toy") return toy();
  throw ConfigError("unknown model preset '" + name + "' (expected nano or toy)");
}

std::string ModelConfig::to_json() const {
  json j;
  j["name"] = name;
  j["base_channels"] = base_channels;
  j["blocks_per_stage"] = blocks_per_stage;
  j["heads_per_level"] = heads_per_level;
  j["window_size"] = window_size;
  j["gcffn_expansion"] = gcffn_expansion;
  j["global_attention"] = global_attention;
  j["in_channels"] = in_channels;
  j["out_channels"] = out_channels;
  j["pretrain_mode"] = pretrain_mode;
  j["composition"] = composition == AttnComposition::kParallel ? "parallel" : "sequential";
  j["relative_position_bias"] = relative_position_bias;
  j["gcffn_bias"] = gcffn_bias;
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
    c.name = j.value("name", c.name);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
    c.heads_per_level = j.value("heads_per_level", c.heads_per_level);
    c.window_size = j.value("window_size", c.window_size);
    c.gcffn_expansion = j.value("gcffn_expansion", c.gcffn_expansion);
    c.global_attention = j.value("global_attention", c.global_attention);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.out_channels = j.value("out_channels", c.out_channels);
    c.pretrain_mode = j.value("pretrain_mode", c.pretrain_mode);
    const std::string comp = j.value("composition", std::string("parallel"));
    if (comp != "parallel" && comp != "sequential") throw ConfigError("composition must be parallel or sequential");
    c.composition = comp == "parallel" ? AttnComposition::kParallel : AttnComposition::kSequential;
    c.relative_position_bias = j.value("relative_position_bias", c.relative_position_bias);
    c.gcffn_bias = j.value("gcffn_bias", c.gcffn_bias);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace csformer
