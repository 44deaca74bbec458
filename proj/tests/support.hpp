#pragma once

// Shared helpers for the unit and acceptance tests: seeded tensors,
// independent reference implementations, and a central-difference checker.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bnas/nn.hpp"
#include "bnas/ops.hpp"
#include "bnas/tensor.hpp"

namespace testing {

using bnas::Shape;
using bnas::Tensor;

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, float scale = 1.0f, bool requires_grad = false) {
  bnas::Rng rng(seed);
  std::vector<float> v(bnas::shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(shape, std::move(v), requires_grad);
}

/// Values drawn uniformly from +-[lo, hi], keeping clear of kinks at zero.
inline Tensor away_from_zero(const Shape& shape, std::uint64_t seed, float lo = 0.1f, float hi = 1.0f,
                             bool requires_grad = false) {
  bnas::Rng rng(seed);
  std::vector<float> v(bnas::shape_numel(shape));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0f : -1.0f) * rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v), requires_grad);
}

/// Direct 7-loop convolution in double precision with zero padding.
inline std::vector<double> naive_conv(const Tensor& x, const Tensor& w, int stride, int pad, int dil, int groups) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int og = o / groups;
  const int ho = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
  const int wo = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(n) * o * ho * wo, 0.0);
  for (int s = 0; s < n; ++s)
    for (int oc = 0; oc < o; ++oc) {
      const int g = oc / og;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int ic = 0; ic < cg; ++ic)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = oy * stride - pad + ky * dil, ix = ox * stride - pad + kx * dil;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += static_cast<double>(x.data()[((static_cast<std::size_t>(s) * c + g * cg + ic) * h + iy) * wd + ix]) *
                       w.data()[((static_cast<std::size_t>(oc) * cg + ic) * kh + ky) * kw + kx];
              }
          out[((static_cast<std::size_t>(s) * o + oc) * ho + oy) * wo + ox] = acc;
        }
    }
  (void)c;
  return out;
}

struct GradCheckResult {
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs = 0.0;
};

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares the tape gradient of L = sum_i f(inputs)_i * r_i against central
/// differences of the same scalar, evaluated in double from the float outputs.
/// `inputs` must require grad; every one of them is checked. `numeric_f`, when
/// given, is differentiated numerically in place of f; used for surrogate
/// gradients such as the straight-through sign.
inline GradCheckResult grad_check(const TensorFn& f, std::vector<Tensor> inputs, double eps = 1e-3, std::uint64_t seed = 99,
                                  const TensorFn& numeric_f = {}) {
  Tensor probe = f(inputs);
  const Tensor r = random_tensor(probe.shape(), seed);
  auto loss_value = [&]() {
    bnas::NoGradGuard ng;
    const Tensor y = numeric_f ? numeric_f(inputs) : f(inputs);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += static_cast<double>(y.data()[i]) * r.data()[i];
    return acc;
  };
  for (auto& t : inputs) t.clear_grad();
  {
    const Tensor y = f(inputs);
    bnas::backward(bnas::ops::sum(bnas::ops::mul(y, r)));
  }
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0, max_abs = 0.0;
  for (auto& t : inputs) {
    std::vector<float> analytic(t.numel(), 0.0f);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const float orig = t.data()[i];
      const float hi = static_cast<float>(orig + eps), lo = static_cast<float>(orig - eps);
      t.data()[i] = hi;
      const double up = loss_value();
      t.data()[i] = lo;
      const double down = loss_value();
      t.data()[i] = orig;
      // The realised step, not 2 eps: float rounding moves both endpoints.
      const double numeric = (up - down) / (static_cast<double>(hi) - lo);
      const double d = analytic[i] - numeric;
      diff2 += d * d;
      a2 += static_cast<double>(analytic[i]) * analytic[i];
      n2 += numeric * numeric;
      max_abs = std::max(max_abs, std::abs(d));
    }
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
  return {std::sqrt(diff2) / denom, max_abs};
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("bnas_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
