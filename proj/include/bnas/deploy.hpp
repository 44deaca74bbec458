#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bnas/binarize.hpp"
#include "bnas/network.hpp"

namespace bnas {

/// Sign bits packed 64 per word along the last axis; bit i of a row is set iff x_i >= 0.
/// Bits past `bits` in the last word of each row are zero.
struct PackedTensor {
  Shape shape;
  int rows = 0;
  int bits = 0;  // logical length n of every packed row
  int words_per_row = 0;
  std::vector<std::uint64_t> words;

  std::span<const std::uint64_t> row(int r) const {
    return {words.data() + static_cast<std::size_t>(r) * words_per_row, static_cast<std::size_t>(words_per_row)};
  }
};

inline int words_for_bits(int bits) { return (bits + 63) / 64; }

PackedTensor pack(const Tensor& x);
/// Tensor of +-1 in the packed tensor's logical shape.
Tensor unpack(const PackedTensor& p);

enum class PopcountImpl { Native, Table };
int popcount64(std::uint64_t v, PopcountImpl impl = PopcountImpl::Native);

/// n - 2 * popcount(a XOR b): the inner product of the two +-1 vectors.
/// Both must be single-row packed tensors of equal length.
long xnor_dot(const PackedTensor& a, const PackedTensor& b, PopcountImpl impl = PopcountImpl::Native);
/// Same over raw words; padding bits must be zero in both.
long xnor_dot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b, int bits,
              PopcountImpl impl = PopcountImpl::Native);

/// Binary filter bank packed per output filter along (in/groups, kh, kw), with per-filter beta.
struct PackedConvWeights {
  ConvGeometry geometry;
  int out_channels = 0;
  int in_channels = 0;
  PackedTensor signs;  // rows = out_channels, bits = in/groups * k * k
  std::vector<float> beta;

  static PackedConvWeights from_latent(const Tensor& latent, const ConvGeometry& geometry);
  static PackedConvWeights from_params(const BinConvParams& params, const ConvGeometry& geometry);
};

/// beta K (.) (B * sign(A)) with the correlation computed by XNOR + popcount over
/// im2row windows. Padded window positions are masked out, matching zero
/// padding of the sign tensor in the float path.
Tensor packed_binconv(const Tensor& activations, const PackedConvWeights& weights,
                      PopcountImpl impl = PopcountImpl::Native);

/// Integer correlation only (before beta and K), [N, out, Ho, Wo].
std::vector<std::int32_t> packed_correlation(const Tensor& activations, const PackedConvWeights& weights,
                                             PopcountImpl impl = PopcountImpl::Native);

/// Backend that evaluates a BinConv2d through packed_binconv.
class PackedBackend : public BinConvBackend {
 public:
  explicit PackedBackend(PackedConvWeights weights) : weights_(std::move(weights)) {}
  Tensor forward(const Tensor& activations, const BinConv2d& layer) const override;
  const PackedConvWeights& weights() const { return weights_; }

 private:
  PackedConvWeights weights_;
};

/// Packs every BinConv2d under `root` from its current latent weights; returns the count.
int install_packed_backend(Module& root);
void remove_packed_backend(Module& root);

/// Operation and storage totals for a realised network.
struct CostReport {
  OpCost total;
  double flops() const { return static_cast<double>(total.float_ops) + static_cast<double>(total.binary_ops) / 64.0; }
  /// 32-bit reference parameter bits over stored bits.
  double memory_savings() const;
  /// Reference float op count over FLOPs.
  double speedup() const;
  std::uint64_t param_bits_binary() const { return total.param_bits; }
  std::uint64_t param_bits_float() const { return total.norm_param_bits + total.float_param_bits; }

  std::string to_text() const;
  std::string to_json() const;
};

/// Cost of one binary 1x1 preprocessing block (batchnorm, sign, binconv).
OpCost binary_pointwise_cost(int in_ch, int out_ch, int h, int w);

/// Walks the network that build_network would realise. Zeroise edges cost
/// nothing; the float reference replaces them by float 3x3 convolutions, since
/// Zeroise has no floating-point counterpart.
CostReport cost_report(const Genotype& genotype, const NetworkConfig& cfg, int in_h = 32, int in_w = 32);
/// Cost of a LayerStack of binary blocks of one kind.
CostReport layer_stack_cost(LayerKind kind, int blocks, int channels, int num_classes, int h, int w);

/// `genotype` with every Zeroise edge replaced by `kind`.
Genotype replace_zeroise(const Genotype& genotype, LayerKind kind);

inline constexpr char kDeployMagic[] = "BNASBIN1";
inline constexpr std::uint32_t kDeployVersion = 1;

/// Compact JSON {genotype, network, input: [h, w]} describing how to rebuild `net`.
std::string model_header(const Network& net);
/// Rebuilds the (freshly initialised) network a header describes. Throws IoError when malformed.
std::unique_ptr<Network> network_from_header(std::string_view json);

/// "BNASBIN1", version, JSON blob {genotype, network, input}, then every
/// parameter and buffer: binary conv weights as packed sign words plus beta,
/// everything else as float32.
void export_model(const std::filesystem::path& path, Network& net);

struct DeployedModel {
  std::unique_ptr<Network> network;  // packed backend installed
  std::string json;                  // the header blob as stored
};
DeployedModel load_deployed(const std::filesystem::path& path);

}  // namespace bnas
