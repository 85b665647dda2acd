#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace csformer {

/// Op classes used for multiply-accumulate accounting.
enum class MacClass : int {
  kConv = 0,       // embedding, output, skip-fusion and channel-attention convs
  kAttnQkv,        // qkv projection
  kAttnLogits,     // q·kᵀ
  kAttnValues,     // softmax(·)·v
  kAttnProj,       // output projection
  kGcffn,          // gated feed-forward point-wise and depth-wise convs
  kResampling,     // convs around pixel-(un)shuffle
  kHead,           // pre-training reconstruction head
};

inline constexpr int kMacClassCount = 8;

std::string_view mac_class_name(MacClass c);

using MacTotals = std::array<std::int64_t, kMacClassCount>;

/// Instrumentation tally fed by the conv2d and matmul kernels during forward
/// passes. Inactive unless a MacTally scope exists on the calling thread.
class MacTally {
 public:
  MacTally();
  ~MacTally();
  MacTally(const MacTally&) = delete;
  MacTally& operator=(const MacTally&) = delete;

  const MacTotals& totals() const { return totals_; }
  std::int64_t total() const;

  static void add(std::int64_t macs);

 private:
  MacTotals totals_{};
  MacTally* previous_;
};

/// Attributes kernel MACs issued inside the scope to one op class.
class MacClassScope {
 public:
  explicit MacClassScope(MacClass c);
  ~MacClassScope();
  MacClassScope(const MacClassScope&) = delete;
  MacClassScope& operator=(const MacClassScope&) = delete;

 private:
  MacClass previous_;
};

}  // namespace csformer
