#include "hcseg/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace hcseg {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

template <typename T>
void BasicTensor<T>::backward() const {
  if (size() != 1) {
    throw ShapeError("backward() needs a single-element loss, got shape " + to_string(shape()));
  }
  if (!impl_->requires_grad) return;
  if (!impl_->node) {
    impl_->grad_buffer()[0] += T(1);
    return;
  }

  // Post-order DFS over interior nodes; reversed, it is a topological order
  // from the loss back to the leaves, so each node runs exactly once.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [cur, next_child] = stack.back();
    const auto& inputs = cur->node->inputs;
    if (next_child < inputs.size()) {
      TensorImpl<T>* child = inputs[next_child++].get();
      if (child->node && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(cur);
      stack.pop_back();
    }
  }

  for (auto* node : order) node->grad.assign(node->values.size(), T(0));
  impl_->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    (*it)->node->backward(**it);
  }
  // Interior gradients are scratch space; only leaves keep theirs.
  for (auto* node : order) {
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace hcseg
