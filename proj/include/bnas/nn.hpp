#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bnas/ops.hpp"
#include "bnas/tensor.hpp"

namespace bnas {

/// Seeded generator shared by initialisers, data shuffling, and augmentation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}
  float uniform(float lo = 0.0f, float hi = 1.0f) { return std::uniform_real_distribution<float>(lo, hi)(engine_); }
  float normal(float mean = 0.0f, float stddev = 1.0f) { return std::normal_distribution<float>(mean, stddev)(engine_); }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }
  std::uint64_t next() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

using NamedTensor = std::pair<std::string, Tensor>;

class Module {
 public:
  virtual ~Module() = default;
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<NamedTensor> named_parameters() const;
  std::vector<NamedTensor> named_buffers() const;
  std::vector<Tensor> parameters() const;

  void set_training(bool training);
  bool training() const { return training_; }
  void zero_grad();

  /// Visits this module and all descendants, depth first.
  void for_each_module(const std::function<void(Module&)>& fn);

 protected:
  Tensor register_parameter(std::string name, Tensor t);
  Tensor register_buffer(std::string name, Tensor t);
  template <class M>
  M* register_module(std::string name, std::unique_ptr<M> m) {
    M* raw = m.get();
    children_.emplace_back(std::move(name), std::move(m));
    return raw;
  }

 private:
  void collect(const std::string& prefix, bool buffers, std::vector<NamedTensor>& out) const;

  bool training_ = true;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

class BatchNorm2d : public Module {
 public:
  BatchNorm2d(int channels, bool affine, float momentum = 0.1f, float eps = 1e-5f);
  Tensor forward(const Tensor& x);
  int channels() const { return channels_; }
  bool affine() const { return gamma_.defined(); }

 private:
  int channels_;
  float momentum_, eps_;
  Tensor gamma_, beta_, running_mean_, running_var_;
};

/// Full-precision convolution without bias.
class Conv2d : public Module {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, ops::Conv2dSpec spec, Rng& rng);
  Tensor forward(const Tensor& x) const { return ops::conv2d(x, weight_, spec_); }
  const Tensor& weight() const { return weight_; }
  const ops::Conv2dSpec& spec() const { return spec_; }
  int in_channels() const { return in_ch_; }
  int out_channels() const { return weight_.dim(0); }
  int kernel() const { return weight_.dim(2); }

 private:
  int in_ch_;
  ops::Conv2dSpec spec_;
  Tensor weight_;
};

class Linear : public Module {
 public:
  Linear(int in_features, int out_features, Rng& rng);
  Tensor forward(const Tensor& x) const { return ops::linear(x, weight_, bias_); }
  const Tensor& weight() const { return weight_; }

 private:
  Tensor weight_, bias_;
};

/// Kaiming-uniform fill with fan_in inputs.
void kaiming_uniform(Tensor& t, int fan_in, Rng& rng);

}  // namespace bnas
