#include "bnas/searchspace.hpp"

#include <array>
#include <stdexcept>

namespace bnas {

namespace {

constexpr std::array<LayerTypeInfo, 9> kLayerInfo{{
    {LayerKind::BinConv3, "bin_conv_3x3", 3, 1, true, false},
    {LayerKind::BinConv5, "bin_conv_5x5", 5, 1, true, false},
    {LayerKind::BinDilConv3, "bin_dil_conv_3x3", 3, 2, true, false},
    {LayerKind::BinDilConv5, "bin_dil_conv_5x5", 5, 2, true, false},
    {LayerKind::MaxPool3, "max_pool_3x3", 3, 1, false, false},
    {LayerKind::AvgPool3, "avg_pool_3x3", 3, 1, false, false},
    {LayerKind::Zeroise, "zeroise", 0, 1, false, false},
    {LayerKind::BinSepConv3, "bin_sep_conv_3x3", 3, 1, true, true},
    {LayerKind::BinSepConv5, "bin_sep_conv_5x5", 5, 1, true, true},
}};

constexpr std::uint64_t kFloatBits = 32;

}  // namespace

const LayerTypeInfo& layer_info(LayerKind kind) { return kLayerInfo.at(static_cast<std::size_t>(kind)); }

std::string_view to_string(LayerKind kind) { return layer_info(kind).name; }

LayerKind layer_kind_from_string(std::string_view name) {
  for (const auto& info : kLayerInfo) {
    if (info.name == name) return info.kind;
  }
  throw std::invalid_argument("unknown layer type '" + std::string(name) + "'");
}

SearchSpace::SearchSpace(std::vector<LayerKind> kinds, std::string version)
    : kinds_(std::move(kinds)), version_(std::move(version)) {
  if (kinds_.empty()) throw std::invalid_argument("search space must not be empty");
}

SearchSpace SearchSpace::standard() {
  return SearchSpace({LayerKind::BinConv3, LayerKind::BinConv5, LayerKind::BinDilConv3, LayerKind::BinDilConv5,
                      LayerKind::MaxPool3, LayerKind::AvgPool3, LayerKind::Zeroise},
                     "standard");
}

SearchSpace SearchSpace::without_dilated() {
  return SearchSpace({LayerKind::BinConv3, LayerKind::BinConv5, LayerKind::MaxPool3, LayerKind::AvgPool3,
                      LayerKind::Zeroise},
                     "no_dilconv");
}

SearchSpace SearchSpace::with_separable() {
  return SearchSpace({LayerKind::BinConv3, LayerKind::BinConv5, LayerKind::BinDilConv3, LayerKind::BinDilConv5,
                      LayerKind::MaxPool3, LayerKind::AvgPool3, LayerKind::Zeroise, LayerKind::BinSepConv3,
                      LayerKind::BinSepConv5},
                     "with_sepconv");
}

SearchSpace SearchSpace::by_name(std::string_view version) {
  if (version == "standard") return standard();
  if (version == "no_dilconv") return without_dilated();
  if (version == "with_sepconv") return with_separable();
  throw std::invalid_argument("unknown search space '" + std::string(version) + "'");
}

int SearchSpace::index_of(LayerKind kind) const {
  for (std::size_t i = 0; i < kinds_.size(); ++i) {
    if (kinds_[i] == kind) return static_cast<int>(i);
  }
  return -1;
}

int block_out_extent(int in, int stride) { return (in - 1) / stride + 1; }

OpBlock::OpBlock(LayerKind kind, int in_ch, int out_ch, int stride, bool affine, Precision precision, Rng& rng)
    : kind_(kind), in_ch_(in_ch), out_ch_(out_ch), stride_(stride), precision_(precision) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("OpBlock: stride must be 1 or 2");
  const auto& info = layer_info(kind);
  if (kind == LayerKind::Zeroise) return;
  if (!info.has_params) {
    if (in_ch != out_ch) throw ShapeError("pool blocks need matching channel counts");
    bn_ = register_module("bn", std::make_unique<BatchNorm2d>(out_ch, affine));
    return;
  }
  bn_ = register_module("bn", std::make_unique<BatchNorm2d>(in_ch, affine));
  if (info.separable) {
    const ConvGeometry dw{info.kernel, stride, 1, info.padding(), in_ch};
    const ConvGeometry pw{1, 1, 1, 0, 1};
    bn2_ = register_module("bn2", std::make_unique<BatchNorm2d>(in_ch, affine));
    if (precision == Precision::Binary) {
      bin_ = register_module("dw", std::make_unique<BinConv2d>(in_ch, in_ch, dw, rng));
      bin2_ = register_module("pw", std::make_unique<BinConv2d>(in_ch, out_ch, pw, rng));
    } else {
      conv_ = register_module("dw", std::make_unique<Conv2d>(in_ch, in_ch, info.kernel, dw.spec(), rng));
      conv2_ = register_module("pw", std::make_unique<Conv2d>(in_ch, out_ch, 1, pw.spec(), rng));
    }
    return;
  }
  const ConvGeometry geo{info.kernel, stride, info.dilation, info.padding(), 1};
  if (precision == Precision::Binary) {
    bin_ = register_module("conv", std::make_unique<BinConv2d>(in_ch, out_ch, geo, rng));
  } else {
    conv_ = register_module("conv", std::make_unique<Conv2d>(in_ch, out_ch, info.kernel, geo.spec(), rng));
  }
}

Tensor OpBlock::forward(const Tensor& x) {
  if (!x.defined() || x.rank() != 4 || x.dim(1) != in_ch_) {
    throw ShapeError("OpBlock(" + std::string(to_string(kind_)) + "): unexpected input " +
                     (x.defined() ? shape_str(x.shape()) : "<undef>"));
  }
  const auto& info = layer_info(kind_);
  switch (kind_) {
    case LayerKind::Zeroise:
      return Tensor::zeros({x.dim(0), out_ch_, block_out_extent(x.dim(2), stride_), block_out_extent(x.dim(3), stride_)});
    case LayerKind::MaxPool3:
      return bn_->forward(ops::max_pool2d(x, 3, stride_, 1));
    case LayerKind::AvgPool3:
      return bn_->forward(ops::avg_pool2d(x, 3, stride_, 1));
    default:
      break;
  }
  const bool binary = precision_ == Precision::Binary;
  auto activate = [binary](const Tensor& t) { return binary ? t : ops::relu(t); };
  Tensor h = activate(bn_->forward(x));
  h = binary ? bin_->forward(h) : conv_->forward(h);
  if (info.separable) {
    h = activate(bn2_->forward(h));
    h = binary ? bin2_->forward(h) : conv2_->forward(h);
  }
  return h;
}

Tensor apply(LayerKind kind, const Tensor& x, int stride, int out_ch) {
  Rng rng(0);
  const int in_ch = x.dim(1);
  OpBlock block(kind, in_ch, out_ch < 0 ? in_ch : out_ch, stride, true, Precision::Binary, rng);
  block.set_training(false);
  return block.forward(x);
}

OpCost& OpCost::operator+=(const OpCost& o) {
  binary_ops += o.binary_ops;
  float_ops += o.float_ops;
  param_bits += o.param_bits;
  norm_param_bits += o.norm_param_bits;
  float_param_bits += o.float_param_bits;
  fp_ops += o.fp_ops;
  fp_param_bits += o.fp_param_bits;
  return *this;
}

OpCost batchnorm_cost(int channels, int h, int w) {
  OpCost c;
  const std::uint64_t n = static_cast<std::uint64_t>(channels) * h * w;
  c.float_ops = 2 * n;
  c.norm_param_bits = 2 * kFloatBits * static_cast<std::uint64_t>(channels);
  c.fp_ops = c.float_ops;
  c.fp_param_bits = c.norm_param_bits;
  return c;
}

OpCost float_conv_cost(int in_ch, int out_ch, int kernel, int out_h, int out_w, int groups) {
  OpCost c;
  const std::uint64_t weights = static_cast<std::uint64_t>(in_ch / groups) * out_ch * kernel * kernel;
  c.float_ops = weights * out_h * out_w;
  c.float_param_bits = kFloatBits * weights;
  c.fp_ops = c.float_ops;
  c.fp_param_bits = c.float_param_bits;
  return c;
}

namespace {

// One binary conv preceded by its batchnorm: MACs as binary ops; batchnorm,
// the |A| channel mean, the K box filter and the beta*K product as float ops.
OpCost binary_conv_cost(int in_ch, int out_ch, int kernel, int groups, int out_h, int out_w, int in_h, int in_w) {
  OpCost c = batchnorm_cost(in_ch, in_h, in_w);
  const std::uint64_t weights = static_cast<std::uint64_t>(in_ch / groups) * out_ch * kernel * kernel;
  const std::uint64_t out_px = static_cast<std::uint64_t>(out_h) * out_w;
  const std::uint64_t in_px = static_cast<std::uint64_t>(in_h) * in_w;
  c.binary_ops = weights * out_px;
  c.float_ops += static_cast<std::uint64_t>(in_ch) * in_px                        // D
                 + static_cast<std::uint64_t>(groups) * kernel * kernel * out_px  // K
                 + 2 * static_cast<std::uint64_t>(out_ch) * out_px;               // beta * K * (B*I)
  c.param_bits = weights + kFloatBits * static_cast<std::uint64_t>(out_ch);
  c.fp_ops += weights * out_px;
  c.fp_param_bits += kFloatBits * weights;
  return c;
}

}  // namespace

OpCost op_cost(LayerKind kind, int in_ch, int out_ch, int out_h, int out_w, int stride) {
  if (in_ch <= 0 || out_ch <= 0 || out_h <= 0 || out_w <= 0 || stride <= 0) {
    throw std::invalid_argument("op_cost: dimensions must be positive");
  }
  const auto& info = layer_info(kind);
  const int in_h = out_h * stride, in_w = out_w * stride;
  if (kind == LayerKind::Zeroise) return {};
  if (!info.has_params) {
    OpCost c = batchnorm_cost(out_ch, out_h, out_w);
    const std::uint64_t window_ops = 9ULL * out_ch * out_h * out_w;
    c.float_ops += window_ops;
    c.fp_ops += window_ops;
    return c;
  }
  if (info.separable) {
    return binary_conv_cost(in_ch, in_ch, info.kernel, in_ch, out_h, out_w, in_h, in_w) +
           binary_conv_cost(in_ch, out_ch, 1, 1, out_h, out_w, out_h, out_w);
  }
  return binary_conv_cost(in_ch, out_ch, info.kernel, 1, out_h, out_w, in_h, in_w);
}

}  // namespace bnas
