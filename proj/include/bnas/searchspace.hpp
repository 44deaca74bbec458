#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bnas/binarize.hpp"
#include "bnas/nn.hpp"

namespace bnas {

/// Candidate layer types. The first seven form the binary search space; the
/// separable kinds exist only for ablations and the layer-type study.
enum class LayerKind : std::uint8_t {
  BinConv3,
  BinConv5,
  BinDilConv3,
  BinDilConv5,
  MaxPool3,
  AvgPool3,
  Zeroise,
  BinSepConv3,
  BinSepConv5,
};

struct LayerTypeInfo {
  LayerKind kind;
  std::string_view name;  // stable snake_case form used in genotype files
  int kernel;             // 0 for Zeroise
  int dilation;
  bool has_params;
  bool separable;
  bool is_conv() const { return has_params; }
  /// Padding that keeps the spatial size at stride 1.
  int padding() const { return kernel == 0 ? 0 : dilation * (kernel - 1) / 2; }
};

const LayerTypeInfo& layer_info(LayerKind kind);
std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

/// Ordered list of candidate kinds; an op's index is its position here.
class SearchSpace {
 public:
  explicit SearchSpace(std::vector<LayerKind> kinds, std::string version);

  /// The seven binary layer types.
  static SearchSpace standard();
  /// Standard space without the dilated kinds.
  static SearchSpace without_dilated();
  /// Standard space plus binary separable 3x3 and 5x5.
  static SearchSpace with_separable();
  static SearchSpace by_name(std::string_view version);

  const std::vector<LayerKind>& kinds() const { return kinds_; }
  int size() const { return static_cast<int>(kinds_.size()); }
  LayerKind at(int index) const { return kinds_.at(static_cast<std::size_t>(index)); }
  /// -1 when absent.
  int index_of(LayerKind kind) const;
  int zeroise_index() const { return index_of(LayerKind::Zeroise); }
  const std::string& version() const { return version_; }

 private:
  std::vector<LayerKind> kinds_;
  std::string version_;
};

enum class Precision { Binary, Float };

/// One layer type realised on an edge:
///   conv kinds: batchnorm -> sign_ste -> binconv(stride)   (float: batchnorm -> relu -> conv)
///   separable: [bn -> sign -> depthwise binconv(stride)] -> [bn -> sign -> pointwise binconv]
///   pools:     pool3x3(stride) -> batchnorm
///   Zeroise:   zeros of the common output shape
class OpBlock : public Module {
 public:
  OpBlock(LayerKind kind, int in_ch, int out_ch, int stride, bool affine, Precision precision, Rng& rng);

  Tensor forward(const Tensor& x);

  LayerKind kind() const { return kind_; }
  int stride() const { return stride_; }
  int out_channels() const { return out_ch_; }

 private:
  LayerKind kind_;
  int in_ch_, out_ch_, stride_;
  Precision precision_;
  BatchNorm2d* bn_ = nullptr;
  BatchNorm2d* bn2_ = nullptr;
  BinConv2d* bin_ = nullptr;
  BinConv2d* bin2_ = nullptr;
  Conv2d* conv_ = nullptr;
  Conv2d* conv2_ = nullptr;
};

/// Stateless convenience wrapper: builds a fresh block (seed 0, affine batchnorm) and applies it.
Tensor apply(LayerKind kind, const Tensor& x, int stride, int out_ch = -1);

/// Output spatial extent of any block at this stride.
int block_out_extent(int in, int stride);

/// Operation and storage counts. fp_* fields describe the same layer kept in
/// full precision, which is the reference for memory savings and speedup.
struct OpCost {
  std::uint64_t binary_ops = 0;        // 1-bit multiply-accumulates
  std::uint64_t float_ops = 0;         // full-precision operations
  std::uint64_t param_bits = 0;        // 1-bit weights + 32-bit beta per filter
  std::uint64_t norm_param_bits = 0;   // 32-bit batchnorm scale/shift
  std::uint64_t float_param_bits = 0;  // 32-bit weights of unbinarised layers
  std::uint64_t fp_ops = 0;
  std::uint64_t fp_param_bits = 0;
  OpCost& operator+=(const OpCost& o);
  friend OpCost operator+(OpCost a, const OpCost& b) { return a += b; }
  friend bool operator==(const OpCost&, const OpCost&) = default;
};

/// Cost of one layer type on an edge producing out_h x out_w outputs.
OpCost op_cost(LayerKind kind, int in_ch, int out_ch, int out_h, int out_w, int stride);

/// Cost of a full-precision convolution (MACs counted as float ops).
OpCost float_conv_cost(int in_ch, int out_ch, int kernel, int out_h, int out_w, int groups = 1);
OpCost batchnorm_cost(int channels, int h, int w);

}  // namespace bnas
