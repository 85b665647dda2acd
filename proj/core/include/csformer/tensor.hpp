#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csformer/error.hpp"

namespace csformer {

/// Extents in N,C,H,W order for image-like data.
using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const Tape<T>* tape = nullptr;
  std::optional<std::size_t> tape_id;
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share storage; the values of a
/// tensor produced by an op are never modified afterwards, only its gradient.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  /// Leaf tensor that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int rank() const { return static_cast<int>(node().shape.size()); }
  int dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node().data.size()); }

  std::span<const T> data() const { return node().data; }
  /// Mutable access is reserved for leaves (parameters, freshly built inputs).
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<int> index) const;

  bool requires_grad() const { return defined() && node().requires_grad; }
  void set_requires_grad(bool value);

  bool has_grad() const { return defined() && !node().grad.empty(); }
  /// Gradient values, or an empty span if none has been accumulated.
  std::span<const T> grad() const { return node().grad; }
  // Gradient state stays mutable through const handles.
  /// Gradient storage, allocated (zero-filled) on first use.
  std::span<T> grad_buffer() const;
  void zero_grad() const;
  void clear_grad() const;
  void accumulate_grad(std::span<const T> delta) const;

  std::optional<std::size_t> tape_id() const { return node().tape_id; }
  const Tape<T>* tape() const { return node().tape; }

  /// Fresh leaf holding a copy of the values.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend class Tape<T>;

  detail::TensorNode<T>& node();
  const detail::TensorNode<T>& node() const;
  detail::TensorNode<T>& grad_node() const;

  std::shared_ptr<detail::TensorNode<T>> node_;
};

/// Reverse-mode record. Ops append entries in execution order, so the entry
/// list is already topologically sorted.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& output)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  /// Tape that ops on the calling thread record onto, or nullptr.
  static Tape* active() { return active_; }

  void record(Tensor<T>& output, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded entry once in reverse
  /// order. Consumes the tape: saved activations are released.
  void backward(const Tensor<T>& loss);

  /// Clears the record so the tape can host a new forward pass.
  void reset();

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  template <typename>
  friend class TapeScope;

  struct Entry {
    Tensor<T> output;
    BackwardFn backward;
  };

  std::vector<Entry> entries_;
  bool consumed_ = false;

  static thread_local Tape* active_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

/// Makes a tape the active one on this thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active_) { Tape<T>::active_ = &tape; }
  ~TapeScope() { Tape<T>::active_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Returns the active tape when at least one input needs a gradient.
template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor<T>* input : inputs) {
    if (input != nullptr && input->requires_grad()) return tape;
  }
  return nullptr;
}

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace csformer
