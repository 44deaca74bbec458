#pragma once

#include <memory>
#include <vector>

#include "bnas/nn.hpp"
#include "bnas/ops.hpp"

namespace bnas {

/// Shape of one (binary) convolution. `groups` > 1 gives grouped/depthwise convs.
struct ConvGeometry {
  int kernel = 3;
  int stride = 1;
  int dilation = 1;
  int padding = 1;
  int groups = 1;

  ops::Conv2dSpec spec() const { return {stride, padding, dilation, groups}; }
};

/// sign(x) with sign(0) = +1. Backward passes the upstream gradient where
/// |x| <= 1 and zero elsewhere.
Tensor sign_ste(const Tensor& x);

/// Per-output-filter mean absolute weight, beta = ||W||_1 / n with n = in*kh*kw.
std::vector<float> compute_beta(const Tensor& weights);
/// Differentiable beta, shape [out].
Tensor filter_beta(const Tensor& weights);

/// Activation scale K = D * k, where D is the channel mean of |A| (per group)
/// and k is a kh x kw box of 1/(kh*kw), applied with the conv's stride,
/// dilation and zero padding. Shape [N, groups, Ho, Wo]; never on the tape.
Tensor compute_K(const Tensor& activations, const ConvGeometry& geometry);

/// Binary approximation of W * A: beta K (.) (sign(W) * sign(A)).
/// Gradients reach the latent weights through sign and beta, and reach A through the STE only.
Tensor binconv_forward(const Tensor& activations, const Tensor& latent_weights, const ConvGeometry& geometry);

/// Mean squared difference between the float conv W * A and its binary approximation.
double quantization_error(const Tensor& activations, const Tensor& weights, const ConvGeometry& geometry);

/// Same, for a depthwise (k x k, per channel) conv followed by a pointwise conv,
/// with the nested approximation beta2 (B2 * (beta1 K1 (.) (B1 * I1))).
double sep_quantization_error(const Tensor& activations, const Tensor& depthwise, const Tensor& pointwise,
                              const ConvGeometry& geometry);

/// Binarised snapshot of a latent filter bank: signs in {-1,+1} and per-filter beta.
struct BinConvParams {
  Shape shape;
  std::vector<float> signs;
  std::vector<float> beta;

  static BinConvParams from_latent(const Tensor& latent);
};

class BinConv2d;

/// Replaces the float evaluation of a BinConv2d, e.g. with a bit-packed kernel.
class BinConvBackend {
 public:
  virtual ~BinConvBackend() = default;
  virtual Tensor forward(const Tensor& activations, const BinConv2d& layer) const = 0;
};

/// Binary convolution layer holding latent float weights.
class BinConv2d : public Module {
 public:
  BinConv2d(int in_ch, int out_ch, ConvGeometry geometry, Rng& rng);

  Tensor forward(const Tensor& activations) const;

  const Tensor& latent() const { return weight_; }
  Tensor& latent() { return weight_; }
  const ConvGeometry& geometry() const { return geometry_; }
  int in_channels() const { return in_ch_; }
  int out_channels() const { return weight_.dim(0); }

  void set_backend(std::shared_ptr<const BinConvBackend> backend) { backend_ = std::move(backend); }
  const std::shared_ptr<const BinConvBackend>& backend() const { return backend_; }

 private:
  int in_ch_;
  ConvGeometry geometry_;
  Tensor weight_;
  std::shared_ptr<const BinConvBackend> backend_;
};

}  // namespace bnas
