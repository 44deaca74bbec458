#include "bnas/binarize.hpp"

#include <cmath>

namespace bnas {

Tensor sign_ste(const Tensor& x) {
  if (!x.defined()) throw ShapeError("sign_ste: undefined tensor");
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] >= 0.0f ? 1.0f : -1.0f;
  detail::check_finite(xd, "sign_ste");
  TensorImpl* xi = x.impl();
  return detail::make_result(
      x.shape(), std::move(out), {x},
      [xi](TensorImpl& self) {
        auto& dv = xi->ensure_grad();
        float* d = dv.data();
        const float* x = xi->data.data();
        const float* g = self.grad.data();
        for (std::size_t i = 0; i < dv.size(); ++i) d[i] += std::fabs(x[i]) <= 1.0f ? g[i] : 0.0f;
      },
      "sign_ste");
}

std::vector<float> compute_beta(const Tensor& weights) {
  if (!weights.defined() || weights.rank() < 1 || weights.numel() == 0) throw ShapeError("compute_beta: empty filter bank");
  const int out = weights.dim(0);
  const std::size_t n = weights.numel() / static_cast<std::size_t>(out);
  if (n == 0) throw ShapeError("compute_beta: empty filter");
  std::vector<float> beta(out);
  for (int o = 0; o < out; ++o) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += std::fabs(weights.data()[o * n + k]);
    beta[o] = static_cast<float>(s / static_cast<double>(n));
  }
  return beta;
}

Tensor filter_beta(const Tensor& weights) {
  std::vector<float> beta = compute_beta(weights);
  const int out = weights.dim(0);
  const std::size_t n = weights.numel() / static_cast<std::size_t>(out);
  TensorImpl* wi = weights.impl();
  return detail::make_result(
      {out}, std::move(beta), {weights},
      [wi, out, n](TensorImpl& self) {
        auto& d = wi->ensure_grad();
        const float inv_n = 1.0f / static_cast<float>(n);
        for (int o = 0; o < out; ++o) {
          for (std::size_t k = 0; k < n; ++k) {
            const float w = wi->data[o * n + k];
            const float s = w > 0.0f ? 1.0f : (w < 0.0f ? -1.0f : 0.0f);
            d[o * n + k] += self.grad[o] * s * inv_n;
          }
        }
      },
      "filter_beta");
}

Tensor compute_K(const Tensor& activations, const ConvGeometry& geo) {
  if (!activations.defined() || activations.rank() != 4) throw ShapeError("compute_K: expected NCHW activations");
  const int n = activations.dim(0), c = activations.dim(1), h = activations.dim(2), w = activations.dim(3);
  if (geo.groups < 1 || c % geo.groups != 0) throw ShapeError("compute_K: channels not divisible by groups");
  const int groups = geo.groups, per = c / groups;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<float> d(static_cast<std::size_t>(n) * groups * hw, 0.0f);
  const float* a = activations.data().data();
  for (int s = 0; s < n; ++s) {
    for (int g = 0; g < groups; ++g) {
      float* dst = d.data() + (static_cast<std::size_t>(s) * groups + g) * hw;
      for (int ch = g * per; ch < (g + 1) * per; ++ch) {
        const float* src = a + (static_cast<std::size_t>(s) * c + ch) * hw;
        for (std::size_t k = 0; k < hw; ++k) dst[k] += std::fabs(src[k]);
      }
      for (std::size_t k = 0; k < hw; ++k) dst[k] /= static_cast<float>(per);
    }
  }
  NoGradGuard no_grad;
  Tensor dmap = Tensor::from({n, groups, h, w}, std::move(d));
  Tensor box = Tensor::full({groups, 1, geo.kernel, geo.kernel}, 1.0f / static_cast<float>(geo.kernel * geo.kernel));
  return ops::conv2d(dmap, box, {geo.stride, geo.padding, geo.dilation, groups});
}

Tensor binconv_forward(const Tensor& activations, const Tensor& latent_weights, const ConvGeometry& geo) {
  if (!latent_weights.defined() || latent_weights.rank() != 4 || latent_weights.dim(2) != geo.kernel ||
      latent_weights.dim(3) != geo.kernel) {
    throw ShapeError("binconv_forward: weight shape does not match geometry");
  }
  Tensor input_signs = sign_ste(activations);
  Tensor weight_signs = sign_ste(latent_weights);
  Tensor beta = filter_beta(latent_weights);
  // Integer-valued correlation first so the packed kernel can reproduce it bit-for-bit.
  Tensor y = ops::conv2d(input_signs, weight_signs, geo.spec());
  y = ops::channel_scale(y, beta);
  return ops::spatial_scale(y, compute_K(activations, geo));
}

namespace {
double mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - b.data()[i];
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}
}  // namespace

double quantization_error(const Tensor& activations, const Tensor& weights, const ConvGeometry& geo) {
  NoGradGuard no_grad;
  return mse(ops::conv2d(activations, weights, geo.spec()), binconv_forward(activations, weights, geo));
}

double sep_quantization_error(const Tensor& activations, const Tensor& depthwise, const Tensor& pointwise,
                              const ConvGeometry& geo) {
  NoGradGuard no_grad;
  const int c = activations.dim(1);
  if (depthwise.rank() != 4 || depthwise.dim(0) != c || depthwise.dim(1) != 1) {
    throw ShapeError("sep_quantization_error: depthwise weights must be [C,1,k,k]");
  }
  if (pointwise.rank() != 4 || pointwise.dim(1) != c || pointwise.dim(2) != 1 || pointwise.dim(3) != 1) {
    throw ShapeError("sep_quantization_error: pointwise weights must be [O,C,1,1]");
  }
  ConvGeometry dw = geo;
  dw.groups = c;
  const Tensor exact = ops::conv2d(ops::conv2d(activations, depthwise, dw.spec()), pointwise);
  // A2 = beta1 K1 (.) (B1 * I1), then beta2 (B2 * A2).
  const Tensor a2 = binconv_forward(activations, depthwise, dw);
  const Tensor approx = ops::channel_scale(ops::conv2d(a2, sign_ste(pointwise)), filter_beta(pointwise));
  return mse(exact, approx);
}

BinConvParams BinConvParams::from_latent(const Tensor& latent) {
  BinConvParams p;
  p.shape = latent.shape();
  p.signs.resize(latent.numel());
  for (std::size_t i = 0; i < p.signs.size(); ++i) p.signs[i] = latent.data()[i] >= 0.0f ? 1.0f : -1.0f;
  p.beta = compute_beta(latent);
  return p;
}

BinConv2d::BinConv2d(int in_ch, int out_ch, ConvGeometry geometry, Rng& rng) : in_ch_(in_ch), geometry_(geometry) {
  if (in_ch % geometry.groups != 0 || out_ch % geometry.groups != 0) throw ShapeError("BinConv2d: channels vs groups");
  Tensor w = Tensor::zeros({out_ch, in_ch / geometry.groups, geometry.kernel, geometry.kernel});
  kaiming_uniform(w, in_ch / geometry.groups * geometry.kernel * geometry.kernel, rng);
  weight_ = register_parameter("weight", w);
}

Tensor BinConv2d::forward(const Tensor& activations) const {
  if (backend_ && !grad_enabled()) return backend_->forward(activations, *this);
  return binconv_forward(activations, weight_, geometry_);
}

}  // namespace bnas
