#pragma once

#include <array>
#include <string>

namespace csformer {

inline constexpr int kLevels = 5;
inline constexpr int kStages = 9;

/// How the channel-attention and self-attention branches of a block combine.
enum class AttnComposition { kParallel, kSequential };

struct ModelConfig {
  std::string name = "custom";
  int base_channels = 8;
  /// Encoder stages 0-3, bottleneck 4, decoder stages 5-8.
  std::array<int, kStages> blocks_per_stage{1, 1, 1, 1, 1, 1, 1, 1, 1};
  /// Indexed by depth level 0-4.
  std::array<int, kLevels> heads_per_level{1, 2, 4, 8, 16};
  int window_size = 8;
  double gcffn_expansion = 2.0;
  /// true = full-map attention at that level; false = (shifted) windows.
  std::array<bool, kLevels> global_attention{false, false, false, false, true};
  int in_channels = 3;
  int out_channels = 3;
  /// Removes the additive input-to-output skip.
  bool pretrain_mode = false;
  AttnComposition composition = AttnComposition::kParallel;
  bool relative_position_bias = false;
  bool gcffn_bias = false;

  /// Throws ConfigError when the configuration is unusable.
  void validate() const;

  int width(int level) const { return base_channels << level; }
  int gcffn_hidden(int level) const;
  /// Depth level of a stage: 0,1,2,3,4,3,2,1,0.
  static int stage_level(int stage) { return stage <= 4 ? stage : 8 - stage; }
  int shift_size() const { return window_size / 2; }

  static ModelConfig nano();
  static ModelConfig toy();
  /// "nano" or "toy"; throws ConfigError otherwise.
  static ModelConfig preset(const std::string& name);

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace csformer
