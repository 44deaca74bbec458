#pragma once

#include <span>
#include <vector>

#include "bnas/tensor.hpp"

// Differentiable primitives. Image tensors are NCHW.
namespace bnas::ops {

struct Conv2dSpec {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

int conv_out_extent(int in, int kernel, int stride, int padding, int dilation);

Tensor conv2d(const Tensor& x, const Tensor& weight, const Conv2dSpec& spec = {});
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[N,F] * weight[O,F]^T + bias[O]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding);
/// Average over in-bounds window elements only (padding excluded from the count).
Tensor avg_pool2d(const Tensor& x, int kernel, int stride, int padding);
Tensor global_avg_pool(const Tensor& x);

struct BatchNormState {
  std::span<float> running_mean;
  std::span<float> running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

/// gamma/beta may be undefined (non-affine). Train mode uses batch statistics
/// and updates running stats; eval mode applies the frozen running stats.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState state, bool training);

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor add_n(const std::vector<Tensor>& xs);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor abs(const Tensor& x);

Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor reshape(const Tensor& x, Shape shape);
/// Drops the first `top` rows and `left` columns of every feature map.
Tensor crop(const Tensor& x, int top, int left);
/// Row i of a rank-2 tensor as a rank-1 tensor.
Tensor row(const Tensor& x, int i);

/// Softmax over the last axis of a rank-1 or rank-2 tensor.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
/// Mean negative log-likelihood of integer labels under logits[N,K].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Sum_i weights[i] * xs[i]. Undefined entries of xs stand for all-zero inputs.
Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& weights);

/// x[N,C,H,W] scaled per channel by v[C].
Tensor channel_scale(const Tensor& x, const Tensor& v);
/// x[N,C,H,W] scaled per position by map[N,G,H,W]; channel c uses map group c / (C/G).
Tensor spatial_scale(const Tensor& x, const Tensor& map);
/// Rows of w[O,...] scaled by v[O].
Tensor row_scale(const Tensor& w, const Tensor& v);

}  // namespace bnas::ops
