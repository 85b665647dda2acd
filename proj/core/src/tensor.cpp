#include "csformer/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace csformer {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int extent : shape) {
    if (extent < 0) throw ShapeError("negative extent in shape " + shape_to_string(shape));
    n *= extent;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<detail::TensorNode<T>>()) {
  const auto n = shape_numel(shape);
  node_->shape = std::move(shape);
  node_->data.assign(static_cast<std::size_t>(n), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::TensorNode<T>>()) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_to_string(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
detail::TensorNode<T>& Tensor<T>::node() {
  if (!node_) throw Error("access to an undefined tensor");
  return *node_;
}

template <typename T>
const detail::TensorNode<T>& Tensor<T>::node() const {
  if (!node_) throw Error("access to an undefined tensor");
  return *node_;
}

template <typename T>
detail::TensorNode<T>& Tensor<T>::grad_node() const {
  if (!node_) throw Error("access to an undefined tensor");
  return *node_;
}

template <typename T>
int Tensor<T>::dim(int axis) const {
  const auto& s = node().shape;
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (node().tape_id) throw TapeError("cannot mutate a tensor recorded on a tape");
  return node().data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  return node().data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<int> index) const {
  const auto& s = node().shape;
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for shape " + shape_to_string(s));
  std::int64_t offset = 0;
  std::size_t axis = 0;
  for (int i : index) {
    if (i < 0 || i >= s[axis]) throw ShapeError("index out of range for shape " + shape_to_string(s));
    offset = offset * s[axis] + i;
    ++axis;
  }
  return node().data[static_cast<std::size_t>(offset)];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool value) {
  node().requires_grad = value;
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() const {
  auto& n = grad_node();
  if (n.grad.empty()) n.grad.assign(n.data.size(), T{0});
  return n.grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  auto& n = grad_node();
  std::fill(n.grad.begin(), n.grad.end(), T{0});
}

template <typename T>
void Tensor<T>::clear_grad() const {
  auto& n = grad_node();
  n.grad.clear();
  n.grad.shrink_to_fit();
}

template <typename T>
void Tensor<T>::accumulate_grad(std::span<const T> delta) const {
  auto g = grad_buffer();
  if (delta.size() != g.size()) throw ShapeError("gradient size mismatch for shape " + shape_to_string(shape()));
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node().shape, node().data);
}

template <typename T>
Tape<T>::~Tape() {
  if (active_ == this) active_ = nullptr;
}

template <typename T>
void Tape<T>::record(Tensor<T>& output, BackwardFn fn) {
  if (consumed_) throw TapeError("recording onto a consumed tape; call reset() first");
  auto& node = output.node();
  node.requires_grad = true;
  node.tape = this;
  node.tape_id = entries_.size();
  entries_.push_back(Entry{output, std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw TapeError("backward called twice without a new forward pass");
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss");
  }
  const auto& node = loss.node();
  if (node.tape != this || !node.tape_id) throw TapeError("loss was not recorded on this tape");

  Tensor<T> seed = loss;
  seed.grad_buffer()[0] += T{1};
  for (std::size_t i = *node.tape_id + 1; i-- > 0;) {
    Entry& entry = entries_[i];
    if (entry.output.has_grad()) entry.backward(entry.output);
  }
  consumed_ = true;
  entries_.clear();
  entries_.shrink_to_fit();
}

template <typename T>
void Tape<T>::reset() {
  entries_.clear();
  consumed_ = false;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace csformer
