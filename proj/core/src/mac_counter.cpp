#include "csformer/mac_counter.hpp"

#include <numeric>

namespace csformer {
namespace {

thread_local MacTally* g_tally = nullptr;
thread_local MacClass g_class = MacClass::kConv;

}  // namespace

std::string_view mac_class_name(MacClass c) {
  switch (c) {
    case MacClass::kConv: return "conv";
    case MacClass::kAttnQkv: return "attn_qkv";
    case MacClass::kAttnLogits: return "attn_logits";
    case MacClass::kAttnValues: return "attn_values";
    case MacClass::kAttnProj: return "attn_proj";
    case MacClass::kGcffn: return "gcffn";
    case MacClass::kResampling: return "resampling";
    case MacClass::kHead: return "head";
  }
  return "unknown";
}

MacTally::MacTally() : previous_(g_tally) { g_tally = this; }

MacTally::~MacTally() { g_tally = previous_; }

std::int64_t MacTally::total() const { return std::accumulate(totals_.begin(), totals_.end(), std::int64_t{0}); }

void MacTally::add(std::int64_t macs) {
  if (g_tally != nullptr) g_tally->totals_[static_cast<int>(g_class)] += macs;
}

MacClassScope::MacClassScope(MacClass c) : previous_(g_class) { g_class = c; }

MacClassScope::~MacClassScope() { g_class = previous_; }

}  // namespace csformer
