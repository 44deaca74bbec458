#include "bnas/nn.hpp"

#include <cmath>

namespace bnas {

std::vector<NamedTensor> Module::named_parameters() const {
  std::vector<NamedTensor> out;
  collect("", false, out);
  return out;
}

std::vector<NamedTensor> Module::named_buffers() const {
  std::vector<NamedTensor> out;
  collect("", true, out);
  return out;
}

std::vector<Tensor> Module::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void Module::collect(const std::string& prefix, bool buffers, std::vector<NamedTensor>& out) const {
  for (const auto& [name, t] : buffers ? buffers_ : params_) out.emplace_back(prefix + name, t);
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", buffers, out);
}

void Module::set_training(bool training) {
  for_each_module([training](Module& m) { m.training_ = training; });
}

void Module::zero_grad() {
  for (auto& t : parameters()) t.zero_grad();
}

void Module::for_each_module(const std::function<void(Module&)>& fn) {
  fn(*this);
  for (auto& [name, child] : children_) child->for_each_module(fn);
}

Tensor Module::register_parameter(std::string name, Tensor t) {
  t.set_requires_grad(true);
  params_.emplace_back(std::move(name), t);
  return t;
}

Tensor Module::register_buffer(std::string name, Tensor t) {
  t.set_requires_grad(false);
  buffers_.emplace_back(std::move(name), t);
  return t;
}

void kaiming_uniform(Tensor& t, int fan_in, Rng& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  for (float& v : t.data()) v = rng.uniform(-bound, bound);
}

BatchNorm2d::BatchNorm2d(int channels, bool affine, float momentum, float eps)
    : channels_(channels), momentum_(momentum), eps_(eps) {
  if (affine) {
    gamma_ = register_parameter("weight", Tensor::full({channels}, 1.0f));
    beta_ = register_parameter("bias", Tensor::zeros({channels}));
  }
  running_mean_ = register_buffer("running_mean", Tensor::zeros({channels}));
  running_var_ = register_buffer("running_var", Tensor::full({channels}, 1.0f));
}

Tensor BatchNorm2d::forward(const Tensor& x) {
  ops::BatchNormState state{running_mean_.data(), running_var_.data(), momentum_, eps_};
  return ops::batch_norm2d(x, gamma_, beta_, state, training());
}

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, ops::Conv2dSpec spec, Rng& rng) : in_ch_(in_ch), spec_(spec) {
  Tensor w = Tensor::zeros({out_ch, in_ch / spec.groups, kernel, kernel});
  kaiming_uniform(w, in_ch / spec.groups * kernel * kernel, rng);
  weight_ = register_parameter("weight", w);
}

Linear::Linear(int in_features, int out_features, Rng& rng) {
  Tensor w = Tensor::zeros({out_features, in_features});
  const float bound = 1.0f / std::sqrt(static_cast<float>(in_features));
  for (float& v : w.data()) v = rng.uniform(-bound, bound);
  weight_ = register_parameter("weight", w);
  Tensor b = Tensor::zeros({out_features});
  for (float& v : b.data()) v = rng.uniform(-bound, bound);
  bias_ = register_parameter("bias", b);
}

}  // namespace bnas
