#include <cstdint>
#include <cstring>
#include "bnas/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace bnas {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int extent : shape) {
    if (extent <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(extent);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<float>& TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, {value}, requires_grad); }

int Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(shape()));
  return impl_->shape[static_cast<std::size_t>(axis)];
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

void Tensor::zero_grad() {
  impl_->grad.assign(impl_->data.size(), 0.0f);
}

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

Tensor Tensor::clone() const {
  Tensor t = from(shape(), impl_->data, impl_->requires_grad);
  return t;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() requires a scalar loss");
  }
  TensorImpl* root = loss.impl();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->is_leaf()) continue;
    if (!node->grad.empty()) node->backward_fn(*node);
    // Closures may write into constant parents; those never expose a gradient.
    for (auto& p : node->parents) {
      if (!p->requires_grad && !p->grad.empty()) {
        p->grad.clear();
        p->grad.shrink_to_fit();
      }
    }
    if (!node->retain_grad) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

namespace detail {

void check_finite(std::span<const float> values, const char* op) {
  // Integer exponent test vectorises; only the slow path locates the index.
  constexpr std::uint32_t kExp = 0x7f800000u;
  std::uint32_t bad = 0;
  const float* v = values.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t b;
    std::memcpy(&b, v + i, sizeof b);
    bad |= static_cast<std::uint32_t>((b & kExp) == kExp);
  }
  if (bad == 0) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NonFiniteError(std::string("non-finite value produced by ") + op + " at index " + std::to_string(i));
    }
  }
}

Tensor make_result(Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                   std::function<void(TensorImpl&)> backward_fn, const char* op) {
  check_finite(data, op);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  const bool needs = grad_enabled() && std::any_of(parents.begin(), parents.end(), [](const Tensor& p) {
                       return p.defined() && p.requires_grad();
                     });
  if (needs) {
    impl->requires_grad = true;
    impl->backward_fn = std::move(backward_fn);
    impl->parents.reserve(parents.size());
    for (auto& p : parents) {
      if (p.defined()) impl->parents.push_back(p.shared());
    }
  }
  return Tensor(std::move(impl));
}

}  // namespace detail
}  // namespace bnas
