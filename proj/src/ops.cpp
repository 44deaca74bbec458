#include "bnas/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace bnas::ops {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_rank(const Tensor& t, int rank, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + (a.defined() ? shape_str(a.shape()) : "<undef>") + " vs " +
                     (b.defined() ? shape_str(b.shape()) : "<undef>"));
  }
}

bool wants_grad(const TensorImpl* p) { return p != nullptr && p->requires_grad; }

struct ConvGeom {
  int n, c, h, w;     // input
  int o, kh, kw;      // weight
  int ho, wo;         // output
  int groups, cg, og; // per-group channels
  int stride, pad, dil;
  int ck() const { return cg * kh * kw; }
  int p() const { return ho * wo; }
};

// Output columns [ox_lo, ox_hi) read inside the input row for kernel column j.
void valid_columns(const ConvGeom& g, int j, int& lo, int& hi) {
  const int off = j * g.dil - g.pad;
  lo = 0;
  while (lo < g.wo && lo * g.stride + off < 0) ++lo;
  hi = g.wo;
  while (hi > lo && (hi - 1) * g.stride + off >= g.w) --hi;
}

// Rows of `col` are `ld` floats apart so several samples can share one matrix.
void im2col(const float* x, const ConvGeom& g, int group, float* col, std::size_t ld) {
  for (int c = 0; c < g.cg; ++c) {
    const float* plane = x + static_cast<std::size_t>(group * g.cg + c) * g.h * g.w;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        float* dst = col + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * ld;
        int lo, hi;
        valid_columns(g, j, lo, hi);
        const int off = j * g.dil - g.pad;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + i * g.dil;
          float* drow = dst + oy * g.wo;
          if (iy < 0 || iy >= g.h || lo >= hi) {
            std::fill(drow, drow + g.wo, 0.0f);
            continue;
          }
          const float* srow = plane + iy * g.w;
          std::fill(drow, drow + lo, 0.0f);
          if (g.stride == 1) {
            std::copy(srow + lo + off, srow + hi + off, drow + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) drow[ox] = srow[ox * g.stride + off];
          }
          std::fill(drow + hi, drow + g.wo, 0.0f);
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeom& g, int group, float* dx, std::size_t ld) {
  for (int c = 0; c < g.cg; ++c) {
    float* plane = dx + static_cast<std::size_t>(group * g.cg + c) * g.h * g.w;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const float* src = col + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * ld;
        int lo, hi;
        valid_columns(g, j, lo, hi);
        const int off = j * g.dil - g.pad;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + i * g.dil;
          if (iy < 0 || iy >= g.h) continue;
          float* drow = plane + iy * g.w;
          const float* srow = src + oy * g.wo;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) drow[ox + off] += srow[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) drow[ox * g.stride + off] += srow[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0; }

// Visits every (output index, input index, tap) triple of one channel plane.
template <class F>
void for_each_tap(const ConvGeom& g, F&& f) {
  for (int i = 0; i < g.kh; ++i) {
    for (int j = 0; j < g.kw; ++j) {
      int lo, hi;
      valid_columns(g, j, lo, hi);
      const int off = j * g.dil - g.pad;
      const int tap = i * g.kw + j;
      for (int oy = 0; oy < g.ho; ++oy) {
        const int iy = oy * g.stride - g.pad + i * g.dil;
        if (iy < 0 || iy >= g.h) continue;
        for (int ox = lo; ox < hi; ++ox) f(oy * g.wo + ox, iy * g.w + ox * g.stride + off, tap);
      }
    }
  }
}

// One input and one output channel per group: direct loops beat a 1-row GEMM.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const ConvGeom& g) {
  const int p = g.p(), taps = g.kh * g.kw, hw = g.h * g.w;
  std::vector<float> out(static_cast<std::size_t>(g.n) * g.o * p, 0.0f);
  const float* xd = x.data().data();
  const float* wd = weight.data().data();
  for (int n = 0; n < g.n; ++n) {
    for (int c = 0; c < g.c; ++c) {
      const std::size_t plane = static_cast<std::size_t>(n) * g.c + c;
      const float* src = xd + plane * hw;
      const float* wk = wd + static_cast<std::size_t>(c) * taps;
      float* dst = out.data() + plane * p;
      for_each_tap(g, [&](int o, int in, int t) { dst[o] += wk[t] * src[in]; });
    }
  }
  TensorImpl* xi = x.impl();
  TensorImpl* wi = weight.impl();
  return detail::make_result(
      {g.n, g.o, g.ho, g.wo}, std::move(out), {x, weight},
      [xi, wi, g, p, taps, hw](TensorImpl& self) {
        float* dw = wants_grad(wi) ? wi->ensure_grad().data() : nullptr;
        float* dx = wants_grad(xi) ? xi->ensure_grad().data() : nullptr;
        const float* xd = xi->data.data();
        const float* wd = wi->data.data();
        for (int n = 0; n < g.n; ++n) {
          for (int c = 0; c < g.c; ++c) {
            const std::size_t plane = static_cast<std::size_t>(n) * g.c + c;
            const float* dy = self.grad.data() + plane * p;
            const float* src = xd + plane * hw;
            if (dw) {
              float acc[64] = {};
              float* target = taps <= 64 ? acc : dw + static_cast<std::size_t>(c) * taps;
              for_each_tap(g, [&](int o, int in, int t) { target[t] += dy[o] * src[in]; });
              if (taps <= 64) {
                for (int t = 0; t < taps; ++t) dw[static_cast<std::size_t>(c) * taps + t] += acc[t];
              }
            }
            if (dx) {
              const float* wk = wd + static_cast<std::size_t>(c) * taps;
              float* dst = dx + plane * hw;
              for_each_tap(g, [&](int o, int in, int t) { dst[in] += wk[t] * dy[o]; });
            }
          }
        }
      },
      "conv2d");
}

}  // namespace

int conv_out_extent(int in, int kernel, int stride, int padding, int dilation) {
  const int span = dilation * (kernel - 1) + 1;
  const int out = (in + 2 * padding - span) / stride + 1;
  if (in + 2 * padding < span || out <= 0) {
    throw ShapeError("convolution window larger than padded input");
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Conv2dSpec& spec) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  if (spec.stride < 1 || spec.dilation < 1 || spec.padding < 0 || spec.groups < 1) {
    throw ShapeError("conv2d: invalid stride/dilation/padding/groups");
  }
  ConvGeom g{};
  g.n = x.dim(0), g.c = x.dim(1), g.h = x.dim(2), g.w = x.dim(3);
  g.o = weight.dim(0), g.kh = weight.dim(2), g.kw = weight.dim(3);
  g.groups = spec.groups;
  if (g.c % g.groups != 0 || g.o % g.groups != 0) throw ShapeError("conv2d: channels not divisible by groups");
  g.cg = g.c / g.groups;
  g.og = g.o / g.groups;
  if (weight.dim(1) != g.cg) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  g.stride = spec.stride, g.pad = spec.padding, g.dil = spec.dilation;
  g.ho = conv_out_extent(g.h, g.kh, g.stride, g.pad, g.dil);
  g.wo = conv_out_extent(g.w, g.kw, g.stride, g.pad, g.dil);

  if (g.cg == 1 && g.og == 1) return depthwise_conv2d(x, weight, g);

  const int p = g.p(), ck = g.ck();
  const std::size_t in_sample = static_cast<std::size_t>(g.c) * g.h * g.w;
  const std::size_t out_sample = static_cast<std::size_t>(g.o) * p;
  // All samples of a group go through one GEMM: col is [ck, n*p], result [og, n*p].
  const std::size_t np = static_cast<std::size_t>(g.n) * p;
  std::vector<float> out(static_cast<std::size_t>(g.n) * out_sample);
  std::vector<float> col(static_cast<std::size_t>(ck) * np);
  std::vector<float> res(static_cast<std::size_t>(g.og) * np);
  const float* xd = x.data().data();
  const float* wd = weight.data().data();
  for (int grp = 0; grp < g.groups; ++grp) {
    for (int n = 0; n < g.n; ++n) {
      if (is_pointwise(g)) {
        const float* src = xd + n * in_sample + static_cast<std::size_t>(grp) * g.cg * p;
        for (int r = 0; r < ck; ++r) std::copy(src + r * p, src + (r + 1) * p, col.data() + r * np + n * p);
      } else {
        im2col(xd + n * in_sample, g, grp, col.data() + static_cast<std::size_t>(n) * p, np);
      }
    }
    ConstMapMat wm(wd + static_cast<std::size_t>(grp) * g.og * ck, g.og, ck);
    MapMat rm(res.data(), g.og, static_cast<Eigen::Index>(np));
    rm.noalias() = wm * ConstMapMat(col.data(), ck, static_cast<Eigen::Index>(np));
    for (int n = 0; n < g.n; ++n) {
      float* dst = out.data() + n * out_sample + static_cast<std::size_t>(grp) * g.og * p;
      for (int r = 0; r < g.og; ++r) {
        const float* src = res.data() + r * np + static_cast<std::size_t>(n) * p;
        std::copy(src, src + p, dst + static_cast<std::size_t>(r) * p);
      }
    }
  }

  TensorImpl* xi = x.impl();
  TensorImpl* wi = weight.impl();
  return detail::make_result(
      {g.n, g.o, g.ho, g.wo}, std::move(out), {x, weight},
      [xi, wi, g, in_sample, out_sample, np](TensorImpl& self) {
        const int p = g.p(), ck = g.ck();
        const bool dx_needed = wants_grad(xi), dw_needed = wants_grad(wi);
        std::vector<float> col(dw_needed ? static_cast<std::size_t>(ck) * np : 0);
        std::vector<float> dcol(dx_needed ? static_cast<std::size_t>(ck) * np : 0);
        std::vector<float> dyg(static_cast<std::size_t>(g.og) * np);
        float* dw = dw_needed ? wi->ensure_grad().data() : nullptr;
        float* dx = dx_needed ? xi->ensure_grad().data() : nullptr;
        const float* xd = xi->data.data();
        for (int grp = 0; grp < g.groups; ++grp) {
          for (int n = 0; n < g.n; ++n) {
            const float* src = self.grad.data() + n * out_sample + static_cast<std::size_t>(grp) * g.og * p;
            for (int r = 0; r < g.og; ++r) {
              std::copy(src + r * p, src + (r + 1) * p, dyg.data() + r * np + static_cast<std::size_t>(n) * p);
            }
          }
          ConstMapMat dy(dyg.data(), g.og, static_cast<Eigen::Index>(np));
          if (dw_needed) {
            for (int n = 0; n < g.n; ++n) {
              if (is_pointwise(g)) {
                const float* src = xd + n * in_sample + static_cast<std::size_t>(grp) * g.cg * p;
                for (int r = 0; r < ck; ++r) std::copy(src + r * p, src + (r + 1) * p, col.data() + r * np + n * p);
              } else {
                im2col(xd + n * in_sample, g, grp, col.data() + static_cast<std::size_t>(n) * p, np);
              }
            }
            MapMat dwm(dw + static_cast<std::size_t>(grp) * g.og * ck, g.og, ck);
            dwm.noalias() += dy * ConstMapMat(col.data(), ck, static_cast<Eigen::Index>(np)).transpose();
          }
          if (dx_needed) {
            ConstMapMat wm(wi->data.data() + static_cast<std::size_t>(grp) * g.og * ck, g.og, ck);
            MapMat dcm(dcol.data(), ck, static_cast<Eigen::Index>(np));
            dcm.noalias() = wm.transpose() * dy;
            for (int n = 0; n < g.n; ++n) {
              float* dxs = dx + n * in_sample;
              if (is_pointwise(g)) {
                float* dst = dxs + static_cast<std::size_t>(grp) * g.cg * p;
                for (int r = 0; r < ck; ++r) {
                  const float* src = dcol.data() + r * np + static_cast<std::size_t>(n) * p;
                  for (int k = 0; k < p; ++k) dst[r * p + k] += src[k];
                }
              } else {
                col2im_add(dcol.data() + static_cast<std::size_t>(n) * p, g, grp, dxs, np);
              }
            }
          }
        }
      },
      "conv2d");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  MapMat(out.data(), m, n).noalias() = ConstMapMat(a.data().data(), m, k) * ConstMapMat(b.data().data(), k, n);
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return detail::make_result(
      {m, n}, std::move(out), {a, b},
      [ai, bi, m, k, n](TensorImpl& self) {
        ConstMapMat dy(self.grad.data(), m, n);
        if (wants_grad(ai)) {
          MapMat(ai->ensure_grad().data(), m, k).noalias() += dy * ConstMapMat(bi->data.data(), k, n).transpose();
        }
        if (wants_grad(bi)) {
          MapMat(bi->ensure_grad().data(), k, n).noalias() += ConstMapMat(ai->data.data(), m, k).transpose() * dy;
        }
      },
      "matmul");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int n = x.dim(0), f = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != f) throw ShapeError("linear: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o)) throw ShapeError("linear: bias shape");
  std::vector<float> out(static_cast<std::size_t>(n) * o);
  MapMat om(out.data(), n, o);
  om.noalias() = ConstMapMat(x.data().data(), n, f) * ConstMapMat(weight.data().data(), o, f).transpose();
  if (bias.defined()) {
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < o; ++c) om(r, c) += bias.data()[c];
  }
  TensorImpl* xi = x.impl();
  TensorImpl* wi = weight.impl();
  TensorImpl* bi = bias.defined() ? bias.impl() : nullptr;
  return detail::make_result(
      {n, o}, std::move(out), {x, weight, bias},
      [xi, wi, bi, n, f, o](TensorImpl& self) {
        ConstMapMat dy(self.grad.data(), n, o);
        if (wants_grad(xi)) {
          MapMat(xi->ensure_grad().data(), n, f).noalias() += dy * ConstMapMat(wi->data.data(), o, f);
        }
        if (wants_grad(wi)) {
          MapMat(wi->ensure_grad().data(), o, f).noalias() += dy.transpose() * ConstMapMat(xi->data.data(), n, f);
        }
        if (wants_grad(bi)) {
          auto& db = bi->ensure_grad();
          for (int r = 0; r < n; ++r)
            for (int c = 0; c < o; ++c) db[c] += dy(r, c);
        }
      },
      "linear");
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding) {
  require_rank(x, 4, "max_pool2d");
  if (padding >= kernel) throw ShapeError("max_pool2d: padding must be smaller than kernel");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = conv_out_extent(h, kernel, stride, padding, 1);
  const int wo = conv_out_extent(w, kernel, stride, padding, 1);
  std::vector<float> out(static_cast<std::size_t>(n) * c * ho * wo);
  std::vector<int> arg(out.size());
  const float* xd = x.data().data();
  std::size_t idx = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const std::size_t base = static_cast<std::size_t>(plane) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox, ++idx) {
        float best = -std::numeric_limits<float>::infinity();
        int best_at = -1;
        for (int i = 0; i < kernel; ++i) {
          const int iy = oy * stride - padding + i;
          if (iy < 0 || iy >= h) continue;
          for (int j = 0; j < kernel; ++j) {
            const int ix = ox * stride - padding + j;
            if (ix < 0 || ix >= w) continue;
            const float v = xd[base + iy * w + ix];
            if (best_at < 0 || v > best) {
              best = v;
              best_at = iy * w + ix;
            }
          }
        }
        out[idx] = best;
        arg[idx] = static_cast<int>(base) + best_at;
      }
    }
  }
  TensorImpl* xi = x.impl();
  return detail::make_result(
      {n, c, ho, wo}, std::move(out), {x},
      [xi, arg = std::move(arg)](TensorImpl& self) {
        auto& dx = xi->ensure_grad();
        for (std::size_t i = 0; i < arg.size(); ++i) dx[static_cast<std::size_t>(arg[i])] += self.grad[i];
      },
      "max_pool2d");
}

Tensor avg_pool2d(const Tensor& x, int kernel, int stride, int padding) {
  require_rank(x, 4, "avg_pool2d");
  if (padding >= kernel) throw ShapeError("avg_pool2d: padding must be smaller than kernel");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = conv_out_extent(h, kernel, stride, padding, 1);
  const int wo = conv_out_extent(w, kernel, stride, padding, 1);
  std::vector<float> out(static_cast<std::size_t>(n) * c * ho * wo);
  const float* xd = x.data().data();
  auto window = [=](int o, int in, int& lo, int& hi) {
    lo = std::max(0, o * stride - padding);
    hi = std::min(in, o * stride - padding + kernel);
  };
  std::size_t idx = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const float* src = xd + static_cast<std::size_t>(plane) * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      int y0, y1;
      window(oy, h, y0, y1);
      for (int ox = 0; ox < wo; ++ox, ++idx) {
        int x0, x1;
        window(ox, w, x0, x1);
        float s = 0.0f;
        for (int iy = y0; iy < y1; ++iy)
          for (int ix = x0; ix < x1; ++ix) s += src[iy * w + ix];
        out[idx] = s / static_cast<float>((y1 - y0) * (x1 - x0));
      }
    }
  }
  TensorImpl* xi = x.impl();
  return detail::make_result(
      {n, c, ho, wo}, std::move(out), {x},
      [xi, n, c, h, w, ho, wo, window](TensorImpl& self) {
        auto& dx = xi->ensure_grad();
        std::size_t idx = 0;
        for (int plane = 0; plane < n * c; ++plane) {
          float* dst = dx.data() + static_cast<std::size_t>(plane) * h * w;
          for (int oy = 0; oy < ho; ++oy) {
            int y0, y1;
            window(oy, h, y0, y1);
            for (int ox = 0; ox < wo; ++ox, ++idx) {
              int x0, x1;
              window(ox, w, x0, x1);
              const float g = self.grad[idx] / static_cast<float>((y1 - y0) * (x1 - x0));
              for (int iy = y0; iy < y1; ++iy)
                for (int ix = x0; ix < x1; ++ix) dst[iy * w + ix] += g;
            }
          }
        }
      },
      "avg_pool2d");
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<float> out(static_cast<std::size_t>(n) * c);
  const float* xd = x.data().data();
  for (int i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (int k = 0; k < hw; ++k) s += xd[static_cast<std::size_t>(i) * hw + k];
    out[i] = static_cast<float>(s / hw);
  }
  TensorImpl* xi = x.impl();
  return detail::make_result(
      {n, c}, std::move(out), {x},
      [xi, n, c, hw](TensorImpl& self) {
        auto& dx = xi->ensure_grad();
        for (int i = 0; i < n * c; ++i) {
          const float g = self.grad[i] / static_cast<float>(hw);
          for (int k = 0; k < hw; ++k) dx[static_cast<std::size_t>(i) * hw + k] += g;
        }
      },
      "global_avg_pool");
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState state, bool training) {
  require_rank(x, 4, "batch_norm2d");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (state.running_mean.size() != static_cast<std::size_t>(c) || state.running_var.size() != static_cast<std::size_t>(c)) {
    throw ShapeError("batch_norm2d: running stats size mismatch");
  }
  if ((gamma.defined() && gamma.numel() != static_cast<std::size_t>(c)) ||
      (beta.defined() && beta.numel() != static_cast<std::size_t>(c))) {
    throw ShapeError("batch_norm2d: affine parameter size mismatch");
  }
  if (training && n < 2) throw ShapeError("batch_norm2d: training mode needs at least 2 samples");
  const float* xd = x.data().data();
  const std::size_t m = static_cast<std::size_t>(n) * hw;
  std::vector<float> mean_c(c), invstd(c);
  for (int ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0.0, ss = 0.0;
      for (int s_i = 0; s_i < n; ++s_i) {
        const float* p = xd + (static_cast<std::size_t>(s_i) * c + ch) * hw;
        for (int k = 0; k < hw; ++k) s += p[k];
      }
      const double mu = s / static_cast<double>(m);
      for (int s_i = 0; s_i < n; ++s_i) {
        const float* p = xd + (static_cast<std::size_t>(s_i) * c + ch) * hw;
        for (int k = 0; k < hw; ++k) {
          const double d = p[k] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(m);
      mean_c[ch] = static_cast<float>(mu);
      invstd[ch] = static_cast<float>(1.0 / std::sqrt(var + state.eps));
      const double unbiased = m > 1 ? ss / static_cast<double>(m - 1) : var;
      state.running_mean[ch] = (1.0f - state.momentum) * state.running_mean[ch] + state.momentum * static_cast<float>(mu);
      state.running_var[ch] = (1.0f - state.momentum) * state.running_var[ch] + state.momentum * static_cast<float>(unbiased);
    } else {
      mean_c[ch] = state.running_mean[ch];
      invstd[ch] = 1.0f / std::sqrt(state.running_var[ch] + state.eps);
    }
  }
  std::vector<float> out(x.numel());
  for (int ch = 0; ch < c; ++ch) {
    const float gm = gamma.defined() ? gamma.data()[ch] : 1.0f;
    const float bt = beta.defined() ? beta.data()[ch] : 0.0f;
    const float scale = gm * invstd[ch];
    const float shift = bt - mean_c[ch] * scale;
    for (int s_i = 0; s_i < n; ++s_i) {
      const std::size_t off = (static_cast<std::size_t>(s_i) * c + ch) * hw;
      const float* src = xd + off;
      float* dst = out.data() + off;
      for (int k = 0; k < hw; ++k) dst[k] = src[k] * scale + shift;
    }
  }
  TensorImpl* xi = x.impl();
  TensorImpl* gi = gamma.defined() ? gamma.impl() : nullptr;
  TensorImpl* bi = beta.defined() ? beta.impl() : nullptr;
  return detail::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [xi, gi, bi, n, c, hw, m, training, mean_c = std::move(mean_c), invstd = std::move(invstd)](TensorImpl& self) {
        const float* xd = xi->data.data();
        const float* dy = self.grad.data();
        float* dx = wants_grad(xi) ? xi->ensure_grad().data() : nullptr;
        for (int ch = 0; ch < c; ++ch) {
          const float gm = gi ? gi->data[ch] : 1.0f;
          const float mu = mean_c[ch];
          const float is = invstd[ch];
          double sum_dy = 0.0, sum_dy_x = 0.0;
          for (int s_i = 0; s_i < n; ++s_i) {
            const std::size_t off = (static_cast<std::size_t>(s_i) * c + ch) * hw;
            float a = 0.0f, b = 0.0f;
            for (int k = 0; k < hw; ++k) {
              a += dy[off + k];
              b += dy[off + k] * (xd[off + k] - mu);
            }
            sum_dy += a;
            sum_dy_x += b;
          }
          const double sum_dy_xhat = sum_dy_x * is;
          if (wants_grad(gi)) gi->ensure_grad()[ch] += static_cast<float>(sum_dy_xhat);
          if (wants_grad(bi)) bi->ensure_grad()[ch] += static_cast<float>(sum_dy);
          if (!dx) continue;
          // dx = gm*is/m * (m*dy - sum_dy - xhat*sum_dy_xhat) = p*dy + q*x + r
          const double md = static_cast<double>(m);
          const float p = gm * is;
          float q = 0.0f, r = 0.0f;
          if (training) {
            const double coef = static_cast<double>(gm) * is / md;
            q = static_cast<float>(-coef * is * sum_dy_xhat);
            r = static_cast<float>(-coef * sum_dy + coef * is * sum_dy_xhat * mu);
          }
          for (int s_i = 0; s_i < n; ++s_i) {
            const std::size_t off = (static_cast<std::size_t>(s_i) * c + ch) * hw;
            for (int k = 0; k < hw; ++k) dx[off + k] += p * dy[off + k] + q * xd[off + k] + r;
          }
        }
      },
      "batch_norm2d");
}

namespace {

template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd bwd, const char* name) {
  if (!x.defined()) throw ShapeError(std::string(name) + ": undefined tensor");
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  TensorImpl* xi = x.impl();
  return detail::make_result(
      x.shape(), std::move(out), {x},
      [xi, bwd](TensorImpl& self) {
        auto& dv = xi->ensure_grad();
        float* dx = dv.data();
        const float* x = xi->data.data();
        const float* y = self.data.data();
        const float* g = self.grad.data();
        for (std::size_t i = 0; i < dv.size(); ++i) dx[i] += g[i] * bwd(x[i], y[i]);
      },
      name);
}

}  // namespace

Tensor relu(const Tensor& x) {
  return unary(
      x, [](float v) { return v > 0.0f ? v : 0.0f; }, [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; }, "relu");
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](float v) { return std::fabs(v); }, [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); },
      "abs");
}

Tensor scale(const Tensor& x, float factor) {
  return unary(
      x, [factor](float v) { return v * factor; }, [factor](float, float) { return factor; }, "scale");
}

Tensor add(const Tensor& a, const Tensor& b) { return add_n({a, b}); }

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return detail::make_result(
      a.shape(), std::move(out), {a, b},
      [ai, bi](TensorImpl& self) {
        if (wants_grad(ai)) {
          auto& d = ai->ensure_grad();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
        }
        if (wants_grad(bi)) {
          auto& d = bi->ensure_grad();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] -= self.grad[i];
        }
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  TensorImpl* ai = a.impl();
  TensorImpl* bi = b.impl();
  return detail::make_result(
      a.shape(), std::move(out), {a, b},
      [ai, bi](TensorImpl& self) {
        if (wants_grad(ai)) {
          auto& d = ai->ensure_grad();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * bi->data[i];
        }
        if (wants_grad(bi)) {
          auto& d = bi->ensure_grad();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * ai->data[i];
        }
      },
      "mul");
}

Tensor add_n(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("add_n: no inputs");
  for (const auto& t : xs) require_same_shape(xs.front(), t, "add");
  std::vector<float> out(xs.front().data().begin(), xs.front().data().end());
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const auto d = xs[k].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += d[i];
  }
  std::vector<TensorImpl*> impls;
  for (const auto& t : xs) impls.push_back(t.impl());
  return detail::make_result(
      xs.front().shape(), std::move(out), xs,
      [impls](TensorImpl& self) {
        for (TensorImpl* p : impls) {
          if (!wants_grad(p)) continue;
          auto& d = p->ensure_grad();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
        }
      },
      "add");
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  TensorImpl* xi = x.impl();
  return detail::make_result(
      {1}, {static_cast<float>(s)}, {x},
      [xi](TensorImpl& self) {
        auto& d = xi->ensure_grad();
        for (auto& v : d) v += self.grad[0];
      },
      "sum");
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  for (const auto& t : xs) require_rank(t, 4, "concat");
  const int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int c_total = 0;
  for (const auto& t : xs) {
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) throw ShapeError("concat: incompatible shapes");
    c_total += t.dim(1);
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<float> out(static_cast<std::size_t>(n) * c_total * hw);
  std::vector<int> offsets;
  int off_c = 0;
  for (const auto& t : xs) {
    offsets.push_back(off_c);
    const int c = t.dim(1);
    for (int s = 0; s < n; ++s) {
      std::copy_n(t.data().data() + static_cast<std::size_t>(s) * c * hw, c * hw,
                  out.data() + (static_cast<std::size_t>(s) * c_total + off_c) * hw);
    }
    off_c += c;
  }
  std::vector<TensorImpl*> impls;
  for (const auto& t : xs) impls.push_back(t.impl());
  return detail::make_result(
      {n, c_total, h, w}, std::move(out), xs,
      [impls, offsets, n, c_total, hw](TensorImpl& self) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
          TensorImpl* p = impls[k];
          if (!wants_grad(p)) continue;
          const int c = p->shape[1];
          auto& d = p->ensure_grad();
          for (int s = 0; s < n; ++s) {
            const float* src = self.grad.data() + (static_cast<std::size_t>(s) * c_total + offsets[k]) * hw;
            float* dst = d.data() + static_cast<std::size_t>(s) * c * hw;
            for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
          }
        }
      },
      "concat");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) throw ShapeError("reshape: element count mismatch");
  std::vector<float> out(x.data().begin(), x.data().end());
  TensorImpl* xi = x.impl();
  return detail::make_result(
      std::move(shape), std::move(out), {x},
      [xi](TensorImpl& self) {
        auto& d = xi->ensure_grad();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
      },
      "reshape");
}

Tensor crop(const Tensor& x, int top, int left) {
  require_rank(x, 4, "crop");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h - top, wo = w - left;
  if (top < 0 || left < 0 || ho <= 0 || wo <= 0) throw ShapeError("crop: offsets out of range");
  std::vector<float> out(static_cast<std::size_t>(n) * c * ho * wo);
  const float* xd = x.data().data();
  for (int p = 0; p < n * c; ++p)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx)
        out[(static_cast<std::size_t>(p) * ho + y) * wo + xx] = xd[(static_cast<std::size_t>(p) * h + y + top) * w + xx + left];
  TensorImpl* xi = x.impl();
  return detail::make_result(
      {n, c, ho, wo}, std::move(out), {x},
      [xi, n, c, h, w, ho, wo, top, left](TensorImpl& self) {
        auto& d = xi->ensure_grad();
        for (int p = 0; p < n * c; ++p)
          for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx)
              d[(static_cast<std::size_t>(p) * h + y + top) * w + xx + left] +=
                  self.grad[(static_cast<std::size_t>(p) * ho + y) * wo + xx];
      },
      "crop");
}

Tensor row(const Tensor& x, int i) {
  require_rank(x, 2, "row");
  const int rows = x.dim(0), cols = x.dim(1);
  if (i < 0 || i >= rows) throw ShapeError("row: index out of range");
  std::vector<float> out(x.data().begin() + static_cast<std::ptrdiff_t>(i) * cols,
                         x.data().begin() + static_cast<std::ptrdiff_t>(i + 1) * cols);
  TensorImpl* xi = x.impl();
  return detail::make_result(
      {cols}, std::move(out), {x},
      [xi, i, cols](TensorImpl& self) {
        auto& d = xi->ensure_grad();
        for (int k = 0; k < cols; ++k) d[static_cast<std::size_t>(i) * cols + k] += self.grad[k];
      },
      "row");
}

namespace {

void rows_of(const Tensor& x, int& rows, int& cols, const char* op) {
  if (x.rank() == 1) {
    rows = 1;
    cols = x.dim(0);
  } else if (x.rank() == 2) {
    rows = x.dim(0);
    cols = x.dim(1);
  } else {
    throw ShapeError(std::string(op) + ": expected rank 1 or 2");
  }
}

std::vector<float> softmax_values(const Tensor& x, int rows, int cols, bool log_space) {
  std::vector<float> out(x.numel());
  const float* xd = x.data().data();
  for (int r = 0; r < rows; ++r) {
    const float* in = xd + static_cast<std::size_t>(r) * cols;
    float* o = out.data() + static_cast<std::size_t>(r) * cols;
    const float mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (int k = 0; k < cols; ++k) z += std::exp(static_cast<double>(in[k] - mx));
    const double log_z = std::log(z);
    for (int k = 0; k < cols; ++k) {
      const double lp = static_cast<double>(in[k] - mx) - log_z;
      o[k] = static_cast<float>(log_space ? lp : std::exp(lp));
    }
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& x) {
  int rows, cols;
  rows_of(x, rows, cols, "softmax");
  TensorImpl* xi = x.impl();
  return detail::make_result(
      x.shape(), softmax_values(x, rows, cols, false), {x},
      [xi, rows, cols](TensorImpl& self) {
        auto& d = xi->ensure_grad();
        for (int r = 0; r < rows; ++r) {
          const float* y = self.data.data() + static_cast<std::size_t>(r) * cols;
          const float* g = self.grad.data() + static_cast<std::size_t>(r) * cols;
          double dot = 0.0;
          for (int k = 0; k < cols; ++k) dot += static_cast<double>(g[k]) * y[k];
          for (int k = 0; k < cols; ++k) d[static_cast<std::size_t>(r) * cols + k] += static_cast<float>(y[k] * (g[k] - dot));
        }
      },
      "softmax");
}

Tensor log_softmax(const Tensor& x) {
  int rows, cols;
  rows_of(x, rows, cols, "log_softmax");
  TensorImpl* xi = x.impl();
  return detail::make_result(
      x.shape(), softmax_values(x, rows, cols, true), {x},
      [xi, rows, cols](TensorImpl& self) {
        auto& d = xi->ensure_grad();
        for (int r = 0; r < rows; ++r) {
          const float* ly = self.data.data() + static_cast<std::size_t>(r) * cols;
          const float* g = self.grad.data() + static_cast<std::size_t>(r) * cols;
          double gsum = 0.0;
          for (int k = 0; k < cols; ++k) gsum += g[k];
          for (int k = 0; k < cols; ++k)
            d[static_cast<std::size_t>(r) * cols + k] += static_cast<float>(g[k] - std::exp(ly[k]) * gsum);
        }
      },
      "log_softmax");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const int n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != static_cast<std::size_t>(n)) throw ShapeError("cross_entropy: label count mismatch");
  for (int y : labels) {
    if (y < 0 || y >= k) throw ShapeError("cross_entropy: label out of range");
  }
  std::vector<float> logp = softmax_values(logits, n, k, true);
  double loss = 0.0;
  for (int r = 0; r < n; ++r) loss -= logp[static_cast<std::size_t>(r) * k + labels[r]];
  loss /= n;
  TensorImpl* li = logits.impl();
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result(
      {1}, {static_cast<float>(loss)}, {logits},
      [li, n, k, lab = std::move(lab), logp = std::move(logp)](TensorImpl& self) {
        auto& d = li->ensure_grad();
        const float g = self.grad[0] / static_cast<float>(n);
        for (int r = 0; r < n; ++r) {
          for (int c = 0; c < k; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * k + c;
            d[i] += g * (std::exp(logp[i]) - (c == lab[r] ? 1.0f : 0.0f));
          }
        }
      },
      "cross_entropy");
}

Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& weights) {
  require_rank(weights, 1, "weighted_sum");
  if (static_cast<std::size_t>(weights.dim(0)) != xs.size()) throw ShapeError("weighted_sum: weight count mismatch");
  const Tensor* ref = nullptr;
  for (const auto& t : xs) {
    if (!t.defined()) continue;
    if (ref && t.shape() != ref->shape()) throw ShapeError("weighted_sum: input shapes differ");
    ref = &t;
  }
  if (!ref) throw ShapeError("weighted_sum: all inputs undefined");
  std::vector<float> out(ref->numel(), 0.0f);
  const auto w = weights.data();
  for (std::size_t k = 0; k < xs.size(); ++k) {
    if (!xs[k].defined()) continue;
    const auto d = xs[k].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w[k] * d[i];
  }
  std::vector<TensorImpl*> impls;
  for (const auto& t : xs) impls.push_back(t.defined() ? t.impl() : nullptr);
  std::vector<Tensor> parents(xs);
  parents.push_back(weights);
  TensorImpl* wi = weights.impl();
  return detail::make_result(
      ref->shape(), std::move(out), std::move(parents),
      [impls, wi](TensorImpl& self) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
          TensorImpl* p = impls[k];
          if (!p) continue;
          if (wants_grad(wi)) {
            double dot = 0.0;
            for (std::size_t i = 0; i < p->data.size(); ++i) dot += static_cast<double>(self.grad[i]) * p->data[i];
            wi->ensure_grad()[k] += static_cast<float>(dot);
          }
          if (wants_grad(p)) {
            auto& d = p->ensure_grad();
            const float wk = wi->data[k];
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += wk * self.grad[i];
          }
        }
      },
      "weighted_sum");
}

Tensor channel_scale(const Tensor& x, const Tensor& v) {
  require_rank(x, 4, "channel_scale");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (v.numel() != static_cast<std::size_t>(c)) throw ShapeError("channel_scale: scale vector size mismatch");
  std::vector<float> out(x.numel());
  const float* xd = x.data().data();
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
      for (int k = 0; k < hw; ++k) out[off + k] = xd[off + k] * v.data()[ch];
    }
  TensorImpl* xi = x.impl();
  TensorImpl* vi = v.impl();
  return detail::make_result(
      x.shape(), std::move(out), {x, v},
      [xi, vi, n, c, hw](TensorImpl& self) {
        for (int s = 0; s < n; ++s)
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
            if (wants_grad(xi)) {
              auto& d = xi->ensure_grad();
              for (int k = 0; k < hw; ++k) d[off + k] += self.grad[off + k] * vi->data[ch];
            }
            if (wants_grad(vi)) {
              double acc = 0.0;
              for (int k = 0; k < hw; ++k) acc += static_cast<double>(self.grad[off + k]) * xi->data[off + k];
              vi->ensure_grad()[ch] += static_cast<float>(acc);
            }
          }
      },
      "channel_scale");
}

Tensor spatial_scale(const Tensor& x, const Tensor& map) {
  require_rank(x, 4, "spatial_scale");
  require_rank(map, 4, "spatial_scale");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const int groups = map.dim(1);
  if (map.dim(0) != n || map.dim(2) != x.dim(2) || map.dim(3) != x.dim(3) || c % groups != 0) {
    throw ShapeError("spatial_scale: map " + shape_str(map.shape()) + " incompatible with " + shape_str(x.shape()));
  }
  const int per = c / groups;
  std::vector<float> out(x.numel());
  const float* xd = x.data().data();
  const float* md = map.data().data();
  for (int s = 0; s < n; ++s)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
      const float* m = md + (static_cast<std::size_t>(s) * groups + ch / per) * hw;
      for (int k = 0; k < hw; ++k) out[off + k] = xd[off + k] * m[k];
    }
  TensorImpl* xi = x.impl();
  TensorImpl* mi = map.impl();
  return detail::make_result(
      x.shape(), std::move(out), {x, map},
      [xi, mi, n, c, hw, groups, per](TensorImpl& self) {
        for (int s = 0; s < n; ++s)
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
            const std::size_t moff = (static_cast<std::size_t>(s) * groups + ch / per) * hw;
            if (wants_grad(xi)) {
              auto& d = xi->ensure_grad();
              for (int k = 0; k < hw; ++k) d[off + k] += self.grad[off + k] * mi->data[moff + k];
            }
            if (wants_grad(mi)) {
              auto& d = mi->ensure_grad();
              for (int k = 0; k < hw; ++k) d[moff + k] += self.grad[off + k] * xi->data[off + k];
            }
          }
      },
      "spatial_scale");
}

Tensor row_scale(const Tensor& w, const Tensor& v) {
  if (!w.defined() || w.rank() < 1) throw ShapeError("row_scale: undefined tensor");
  const int rows = w.dim(0);
  if (v.numel() != static_cast<std::size_t>(rows)) throw ShapeError("row_scale: scale vector size mismatch");
  const std::size_t per = w.numel() / rows;
  std::vector<float> out(w.numel());
  for (int r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < per; ++k) out[r * per + k] = w.data()[r * per + k] * v.data()[r];
  TensorImpl* wi = w.impl();
  TensorImpl* vi = v.impl();
  return detail::make_result(
      w.shape(), std::move(out), {w, v},
      [wi, vi, rows, per](TensorImpl& self) {
        for (int r = 0; r < rows; ++r) {
          if (wants_grad(wi)) {
            auto& d = wi->ensure_grad();
            for (std::size_t k = 0; k < per; ++k) d[r * per + k] += self.grad[r * per + k] * vi->data[r];
          }
          if (wants_grad(vi)) {
            double acc = 0.0;
            for (std::size_t k = 0; k < per; ++k) acc += static_cast<double>(self.grad[r * per + k]) * wi->data[r * per + k];
            vi->ensure_grad()[r] += static_cast<float>(acc);
          }
        }
      },
      "row_scale");
}

}  // namespace bnas::ops
