#pragma once

// Dense n-dimensional tensors with reverse-mode differentiation.
//
// A tensor is a cheap handle onto shared storage. Operations that consume a
// tensor requiring gradients record a GraphNode on their result; backward()
// walks those nodes in reverse topological order and accumulates gradients
// into every leaf that asked for them.
//
// Layout is row-major; image tensors are (batch, channel, height, width).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hcseg {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thread-local switch that suppresses graph recording (inference, finite
/// differences). Nesting is supported.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled();

 private:
  bool previous_;
};

template <typename T>
struct TensorImpl;

template <typename T>
struct GraphNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads out.grad and accumulates into the inputs that require gradients.
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<GraphNode<T>> node;

  std::vector<T>& grad_buffer() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    return grad;
  }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  BasicTensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (numel(shape) != values.size()) {
      throw ShapeError("shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                       " elements but " + std::to_string(values.size()) + " values were given");
    }
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
  }

  static BasicTensor zeros(const Shape& shape) { return full(shape, T(0)); }
  static BasicTensor full(const Shape& shape, T value) {
    return BasicTensor(shape, std::vector<T>(numel(shape), value));
  }
  static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->values.size(); }

  std::span<const T> values() const { return impl_->values; }
  /// Writable view; only meaningful on leaves (parameters, data).
  std::span<T> mutable_values() const { return impl_->values; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return impl_->values[0];
  }
  T operator[](std::size_t i) const { return impl_->values[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true) {
    if (impl_->node) throw std::logic_error("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return impl_->node == nullptr; }

  bool has_grad() const { return impl_->grad.size() == impl_->values.size(); }
  /// Accumulated gradient; empty span when nothing has been accumulated.
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() const { return impl_->grad_buffer(); }
  void zero_grad() const { impl_->grad.clear(); }

  /// Same values, no graph history, no gradient requirement.
  BasicTensor detach() const { return BasicTensor(impl_->shape, impl_->values); }

  /// Populates d(this)/d(leaf) on every leaf requiring gradients. The tensor
  /// must hold exactly one element. Leaf gradients accumulate across calls
  /// until zero_grad().
  void backward() const;

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace detail {

template <typename T>
bool needs_graph(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!NoGradGuard::grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

/// Builds an op result; attaches a graph node when any input requires grad.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                           std::vector<BasicTensor<T>> inputs,
                           std::function<void(const TensorImpl<T>&)> backward) {
  BasicTensor<T> out(std::move(shape), std::move(values));
  bool track = false;
  if (NoGradGuard::grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    auto node = std::make_shared<GraphNode<T>>();
    node->op = op;
    for (auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
    out.impl()->requires_grad = true;
  }
  return out;
}

/// Gradient buffer of an input, or nullptr when it does not need one.
template <typename T>
std::vector<T>* grad_sink(const std::shared_ptr<TensorImpl<T>>& impl) {
  return impl->requires_grad ? &impl->grad_buffer() : nullptr;
}

}  // namespace detail

}  // namespace hcseg
