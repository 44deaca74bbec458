#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bnas {

using Shape = std::vector<int>;

/// Raised for shape mismatches and malformed arguments to tensor ops.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward op produces NaN or Inf from finite inputs.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty means "no gradient"
  bool requires_grad = false;
  bool retain_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Accumulates this node's grad into its parents' grads.
  std::function<void(TensorImpl&)> backward_fn;
  const char* op = "leaf";

  bool is_leaf() const { return !backward_fn; }
  std::vector<float>& ensure_grad();
};

/// Dense row-major float tensor. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }
  std::vector<float>& storage() { return impl_->data; }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  void retain_grad() { impl_->retain_grad = true; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  std::span<float> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  Tensor detach() const;
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Reverse-mode pass from a scalar loss. Leaves accumulate into their grad;
/// intermediate grads are released unless retain_grad() was set.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables tape recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Builds an op result. Records the backward closure only when grad mode is on
// and some parent requires grad. Throws NonFiniteError on NaN/Inf output.
Tensor make_result(Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                   std::function<void(TensorImpl&)> backward_fn, const char* op);

void check_finite(std::span<const float> values, const char* op);

}  // namespace detail
}  // namespace bnas
