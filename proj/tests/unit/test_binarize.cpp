#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bnas/binarize.hpp"
#include "support.hpp"

using namespace bnas;
using testing::random_tensor;

namespace {

// Independent reference for beta K (.) (sign W * sign A): scalar loops in double.
std::vector<double> reference_binconv(const Tensor& a, const Tensor& w, const ConvGeometry& g) {
  auto signs = [](const Tensor& t) {
    std::vector<float> s(t.numel());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = t.data()[i] >= 0 ? 1.0f : -1.0f;
    return Tensor::from(t.shape(), std::move(s));
  };
  const auto corr = testing::naive_conv(signs(a), signs(w), g.stride, g.padding, g.dilation, g.groups);
  const int n = a.dim(0), c = a.dim(1), h = a.dim(2), wd = a.dim(3), o = w.dim(0);
  const int per_filter = w.dim(1) * g.kernel * g.kernel;
  const int ho = ops::conv_out_extent(h, g.kernel, g.stride, g.padding, g.dilation);
  const int wo = ops::conv_out_extent(wd, g.kernel, g.stride, g.padding, g.dilation);
  const int per_group = c / g.groups, og = o / g.groups;
  std::vector<double> out(corr.size());
  for (int s = 0; s < n; ++s)
    for (int oc = 0; oc < o; ++oc) {
      double beta = 0;
      for (int i = 0; i < per_filter; ++i) beta += std::abs(w.data()[static_cast<std::size_t>(oc) * per_filter + i]);
      beta /= per_filter;
      const int grp = oc / og;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double k = 0;
          for (int ky = 0; ky < g.kernel; ++ky)
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int iy = oy * g.stride - g.padding + ky * g.dilation;
              const int ix = ox * g.stride - g.padding + kx * g.dilation;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              double d = 0;
              for (int ch = grp * per_group; ch < (grp + 1) * per_group; ++ch)
                d += std::abs(a.data()[((static_cast<std::size_t>(s) * c + ch) * h + iy) * wd + ix]);
              k += d / per_group;
            }
          k /= g.kernel * g.kernel;
          const std::size_t idx = ((static_cast<std::size_t>(s) * o + oc) * ho + oy) * wo + ox;
          out[idx] = beta * k * corr[idx];
        }
    }
  return out;
}

}  // namespace

TEST_CASE("sign uses +1 at zero") {
  const Tensor y = sign_ste(Tensor::from({3}, {0.5f, -0.3f, 0.0f}));
  CHECK(y.data()[0] == 1.0f);
  CHECK(y.data()[1] == -1.0f);
  CHECK(y.data()[2] == 1.0f);
}

TEST_CASE("clipped straight-through gradient") {
  Tensor x = Tensor::from({3}, {0.5f, -2.0f, 0.9f}, true);
  backward(ops::sum(sign_ste(x)));
  CHECK(x.grad()[0] == 1.0f);
  CHECK(x.grad()[1] == 0.0f);
  CHECK(x.grad()[2] == 1.0f);
  // The window is closed: |x| == 1 still passes the gradient.
  Tensor edge = Tensor::from({2}, {1.0f, -1.0f}, true);
  backward(ops::sum(sign_ste(edge)));
  CHECK(edge.grad()[0] == 1.0f);
  CHECK(edge.grad()[1] == 1.0f);
}

TEST_CASE("sign is idempotent") {
  const Tensor x = random_tensor({40}, 3);
  const Tensor once = sign_ste(x), twice = sign_ste(sign_ste(x));
  CHECK(std::equal(once.data().begin(), once.data().end(), twice.data().begin()));
}

TEST_CASE("beta is the per-filter mean absolute weight") {
  const auto b = compute_beta(Tensor::from({1, 4, 1, 1}, {0.5f, -1.5f, 2.0f, -1.0f}));
  CHECK(b.at(0) == doctest::Approx(1.25));
  CHECK(compute_beta(Tensor::zeros({2, 1, 3, 3})).at(1) == 0.0f);
  const auto many = compute_beta(random_tensor({6, 3, 3, 3}, 7));
  for (float v : many) CHECK(v > 0.0f);
}

TEST_CASE("K of a constant-magnitude input is that magnitude") {
  std::vector<float> v(2 * 3 * 6 * 6);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i % 3 == 0 ? -2.0f : 2.0f;
  const Tensor a = Tensor::from({2, 3, 6, 6}, v);
  for (int k : {1, 3, 5}) {
    const Tensor K = compute_K(a, {k, 1, 1, 0, 1});
    for (float x : K.data()) CHECK(x == doctest::Approx(2.0));
  }
  const Tensor dil = compute_K(a, {3, 2, 2, 0, 1});
  for (float x : dil.data()) CHECK(x == doctest::Approx(2.0));
}

TEST_CASE("K is non-negative and detached") {
  Tensor a = random_tensor({2, 4, 5, 5}, 9, 1.0f, true);
  const Tensor K = compute_K(a, {3, 1, 1, 1, 1});
  CHECK(K.shape() == Shape{2, 1, 5, 5});
  CHECK(K.impl()->is_leaf());
  for (float x : K.data()) CHECK(x >= 0.0f);
}

TEST_CASE("binary inputs and weights reduce to the sign correlation") {
  std::vector<float> av(1 * 2 * 4 * 4), wv(3 * 2 * 3 * 3);
  Rng rng(5);
  for (auto& x : av) x = rng.bernoulli(0.5) ? 1.0f : -1.0f;
  for (auto& x : wv) x = rng.bernoulli(0.5) ? 1.0f : -1.0f;
  const Tensor a = Tensor::from({1, 2, 4, 4}, av), w = Tensor::from({3, 2, 3, 3}, wv);
  const ConvGeometry g{3, 1, 1, 0, 1};
  const Tensor y = binconv_forward(a, w, g);
  const auto corr = testing::naive_conv(a, w, 1, 0, 1, 1);
  for (std::size_t i = 0; i < corr.size(); ++i) CHECK(y.data()[i] == static_cast<float>(corr[i]));
  CHECK(quantization_error(a, w, g) == 0.0);
}

TEST_CASE("a 1x1 single-channel binary conv is exact") {
  const Tensor y = binconv_forward(Tensor::from({1, 1, 1, 1}, {3.0f}), Tensor::from({1, 1, 1, 1}, {-0.5f}), {1, 1, 1, 0, 1});
  CHECK(y.item() == doctest::Approx(-1.5));
  const Tensor a = random_tensor({3, 1, 4, 4}, 2);
  const Tensor w = Tensor::from({1, 1, 1, 1}, {0.8f});
  CHECK(quantization_error(a, w, {1, 1, 1, 0, 1}) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("binconv matches the scalar-loop reference") {
  struct Case {
    Shape x, w;
    ConvGeometry g;
  };
  const std::vector<Case> shapes{
      {{1, 4, 8, 8}, {4, 4, 3, 3}, {3, 1, 1, 1, 1}},  {{2, 4, 8, 8}, {6, 4, 5, 5}, {5, 2, 1, 2, 1}},
      {{1, 3, 9, 9}, {2, 3, 3, 3}, {3, 1, 2, 2, 1}},  {{1, 4, 7, 7}, {4, 1, 3, 3}, {3, 2, 1, 1, 4}},
      {{2, 5, 6, 6}, {3, 5, 1, 1}, {1, 1, 1, 0, 1}},
  };
  std::uint64_t seed = 20;
  for (const auto& c : shapes) {
    const Tensor a = random_tensor(c.x, seed++);
    const Tensor w = random_tensor(c.w, seed++);
    const Tensor y = binconv_forward(a, w, c.g);
    const auto ref = reference_binconv(a, w, c.g);
    REQUIRE(y.numel() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-5).scale(1.0));
  }
}

TEST_CASE("output scales linearly with activation magnitude") {
  const Tensor a = random_tensor({1, 3, 6, 6}, 31);
  const Tensor w = random_tensor({2, 3, 3, 3}, 32);
  const ConvGeometry g{3, 1, 1, 1, 1};
  const Tensor y = binconv_forward(a, w, g);
  const Tensor y4 = binconv_forward(ops::scale(a, 4.0f), w, g);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y4.data()[i] == doctest::Approx(4.0 * y.data()[i]).epsilon(1e-5));
}

TEST_CASE("scaling weights keeps signs and scales beta") {
  const Tensor w = random_tensor({3, 2, 3, 3}, 33);
  const auto p = BinConvParams::from_latent(w);
  const auto q = BinConvParams::from_latent(ops::scale(w, 2.5f));
  CHECK(p.signs == q.signs);
  for (float s : p.signs) CHECK((s == 1.0f || s == -1.0f));
  for (std::size_t i = 0; i < p.beta.size(); ++i) CHECK(q.beta[i] == doctest::Approx(2.5 * p.beta[i]));
}

TEST_CASE("activation gradient vanishes outside the clip window") {
  Tensor a = random_tensor({1, 2, 5, 5}, 40, 1.5f, true);
  const Tensor w = random_tensor({3, 2, 3, 3}, 41);
  backward(ops::sum(binconv_forward(a, w, {3, 1, 1, 1, 1})));
  int inside_nonzero = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (std::abs(a.data()[i]) > 1.0f) CHECK(a.grad()[i] == 0.0f);
    else if (a.grad()[i] != 0.0f) ++inside_nonzero;
  }
  CHECK(inside_nonzero > 0);
}

TEST_CASE("latent weights receive gradient through sign and beta") {
  const Tensor a = random_tensor({2, 2, 4, 4}, 42);
  Tensor w = random_tensor({2, 2, 3, 3}, 43, 0.5f, true);
  backward(ops::sum(binconv_forward(a, w, {3, 1, 1, 1, 1})));
  double norm = 0;
  for (float g : w.grad()) norm += g * g;
  CHECK(norm > 0);
}

TEST_CASE("separable nesting adds quantization error on average") {
  // Both stacks see 144 inputs per output, so raw errors are comparable. The
  // acceptance binary runs the full paired comparison.
  double sep_total = 0, plain_total = 0;
  for (std::uint64_t t = 0; t < 20; ++t) {
    const Tensor a = random_tensor({1, 16, 8, 8}, 100 + t);
    const Tensor dw = random_tensor({16, 1, 3, 3}, 200 + t);
    const Tensor pw = random_tensor({16, 16, 1, 1}, 300 + t);
    const Tensor plain = random_tensor({16, 16, 3, 3}, 400 + t);
    const ConvGeometry g{3, 1, 1, 1, 1};
    sep_total += sep_quantization_error(a, dw, pw, g);
    plain_total += quantization_error(a, plain, g);
  }
  CHECK(sep_total > plain_total);
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(binconv_forward(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({2, 2, 5, 5}), {3, 1, 1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(sep_quantization_error(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({2, 2, 3, 3}), Tensor::zeros({2, 2, 1, 1}),
                                         {3, 1, 1, 1, 1}),
                  ShapeError);
}
