#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "bnas/nn.hpp"
#include "bnas/searchspace.hpp"

namespace bnas {

inline constexpr int kIntermediateNodes = 4;
inline constexpr int kCellEdges = 14;  // sum over nodes i of (i + 2) candidate sources
inline constexpr int kGenotypeVersion = 1;

enum class CellKind { Normal, Reduction };

/// Node ids: 0 = c_(k-2), 1 = c_(k-1), 2 + i = intermediate node i.
struct CellEdge {
  int source;
  int target;  // intermediate node index in [0, 4)
};

/// Edges in canonical order: node 0's sources, then node 1's, and so on.
const std::array<CellEdge, kCellEdges>& cell_edges();
int edge_index(int target, int source);
/// Reduction cells stride only the edges that read a cell input.
int edge_stride(CellKind kind, int source);

struct GenotypeEdge {
  int source = 0;
  LayerKind op = LayerKind::Zeroise;
  friend bool operator==(const GenotypeEdge&, const GenotypeEdge&) = default;
};

/// Two retained (source, op) pairs per intermediate node, node-major.
using CellGenotype = std::array<GenotypeEdge, 2 * kIntermediateNodes>;

class GenotypeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Genotype {
  int version = kGenotypeVersion;
  CellGenotype normal{};
  CellGenotype reduce{};
  double gamma = 1.0;  // +inf when Zeroise was excluded at derivation
  std::uint64_t seed = 0;
  std::string space = "standard";

  const CellGenotype& cell(CellKind kind) const { return kind == CellKind::Normal ? normal : reduce; }
  CellGenotype& cell(CellKind kind) { return kind == CellKind::Normal ? normal : reduce; }

  /// Throws GenotypeError on out-of-range or duplicate sources.
  void validate() const;
  int count(LayerKind kind) const;

  /// Fixed field order {version, normal, reduce, gamma, seed, space}; byte-stable.
  std::string to_json() const;
  static Genotype from_json(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Genotype load(const std::filesystem::path& path);

  /// Every retained op replaced by `kind` (sources unchanged).
  static Genotype uniform(LayerKind kind);
  friend bool operator==(const Genotype&, const Genotype&) = default;
};

/// Per-edge architecture logits for normal and reduction cells, shared by all
/// cells of the same kind.
class ArchParams {
 public:
  ArchParams(SearchSpace space, Rng& rng, float init_scale = 1e-3f);

  const SearchSpace& space() const { return space_; }
  Tensor& logits(CellKind kind) { return kind == CellKind::Normal ? normal_ : reduce_; }
  const Tensor& logits(CellKind kind) const { return kind == CellKind::Normal ? normal_ : reduce_; }
  /// Row-wise softmax [14, n_ops], recorded on the tape.
  Tensor weights(CellKind kind) const;
  /// Row-wise softmax values without recording.
  std::vector<std::vector<float>> probabilities(CellKind kind) const;
  std::vector<Tensor> parameters() const { return {normal_, reduce_}; }

 private:
  SearchSpace space_;
  Tensor normal_, reduce_;
};

/// batchnorm -> sign -> 1x1 binary conv.
class BinaryPointwise : public Module {
 public:
  BinaryPointwise(int in_ch, int out_ch, bool affine, Rng& rng);
  Tensor forward(const Tensor& x);

 private:
  BatchNorm2d* bn_;
  BinConv2d* conv_;
};

/// relu -> two offset stride-2 1x1 float convs -> concat -> batchnorm.
class FactorizedReduce : public Module {
 public:
  FactorizedReduce(int in_ch, int out_ch, bool affine, Rng& rng);
  Tensor forward(const Tensor& x);

 private:
  Conv2d* conv_a_;
  Conv2d* conv_b_;
  BatchNorm2d* bn_;
};

/// Shortcut from c_(k-1) to the cell output. Identity when widths match on a
/// normal cell; otherwise [3x3 avgpool stride 2 on reductions] -> float 1x1 projection.
/// Disabled skips contribute nothing.
class InterCellSkip : public Module {
 public:
  InterCellSkip(int in_ch, int out_ch, bool reduction, bool enabled, Rng& rng);
  /// Undefined tensor when disabled.
  Tensor forward(const Tensor& x);
  bool enabled() const { return enabled_; }
  bool is_identity() const { return enabled_ && projection_ == nullptr && !reduction_; }

 private:
  bool reduction_, enabled_;
  Conv2d* projection_ = nullptr;
};

/// Widths and flags of one cell inside a network.
struct CellPlan {
  int prev_prev_channels;
  int prev_channels;
  int channels;  // per intermediate node; output has 4x this
  bool reduction;
  bool reduction_prev;
  int in_h, in_w;  // spatial size of c_(k-1)
};

/// Shared pieces of supercells and discrete cells.
class CellBase : public Module {
 public:
  const CellPlan& plan() const { return plan_; }
  int out_channels() const { return kIntermediateNodes * plan_.channels; }
  InterCellSkip& skip() { return *skip_; }

 protected:
  CellBase(const CellPlan& plan, bool skip_enabled, bool affine, Rng& rng);
  std::pair<Tensor, Tensor> preprocess(const Tensor& prev_prev, const Tensor& prev);
  Tensor finish(std::vector<Tensor> nodes, const Tensor& prev);

  CellPlan plan_;
  Module* pre0_;
  BinaryPointwise* pre1_;
  InterCellSkip* skip_;
};

/// Continuous relaxation: every edge is a softmax-weighted sum over all candidate blocks.
class SuperCell : public CellBase {
 public:
  SuperCell(const CellPlan& plan, const SearchSpace& space, bool skip_enabled, Rng& rng);
  /// weights: [14, n_ops] softmaxed arch weights.
  Tensor forward(const Tensor& prev_prev, const Tensor& prev, const Tensor& weights);
  OpBlock& block(int edge, int op) { return *edges_.at(static_cast<std::size_t>(edge)).at(static_cast<std::size_t>(op)); }

 private:
  std::vector<std::vector<OpBlock*>> edges_;
};

/// A cell with exactly the genotype's retained edges.
class DiscreteCell : public CellBase {
 public:
  DiscreteCell(const CellPlan& plan, const CellGenotype& genotype, bool skip_enabled, Rng& rng);
  Tensor forward(const Tensor& prev_prev, const Tensor& prev);
  OpBlock& block(int node, int slot) { return *ops_.at(static_cast<std::size_t>(2 * node + slot)); }
  const CellGenotype& genotype() const { return genotype_; }

 private:
  CellGenotype genotype_;
  std::vector<OpBlock*> ops_;
};

}  // namespace bnas
