#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "csformer/config.hpp"
#include "csformer/tensor.hpp"

namespace csformer {

/// Named parameter set in declaration order. Names are hierarchical, e.g.
/// "stage2.block0.attn.qkv.weight".
template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& at(const std::string& name) const;
  Tensor<T>& at(const std::string& name);
  /// The tensor, or an undefined tensor when absent.
  Tensor<T> find(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }
  std::size_t size() const { return names_.size(); }
  std::int64_t numel() const;

  void set_requires_grad(bool value);
  void zero_grad();

  /// Deep copy with fresh storage.
  ParamStore clone() const;
  template <typename U>
  ParamStore<U> cast() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

struct InitOptions {
  std::uint64_t seed = 0;
  /// Zero output conv so a fresh model restores its input unchanged.
  bool zero_output = true;
};

/// Deterministic initialisation: truncated normal (std 0.02) for attention and
/// channel-attention weights, fan-in scaled uniform for convolutions, zero
/// biases, unit LayerNorm gains.
template <typename T>
ParamStore<T> init_params(const ModelConfig& config, const InitOptions& options = {});

/// Closed-form parameter count.
std::int64_t count_params(const ModelConfig& config);

/// True for names belonging to the encoder (embedding through bottleneck).
bool is_encoder_param(const std::string& name);

std::string block_prefix(int stage, int block);

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace csformer
