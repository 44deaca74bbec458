#pragma once

#include <array>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "bnas/cell.hpp"

namespace bnas {

struct NetworkConfig {
  std::string name = "custom";
  int num_cells = 8;
  int init_channels = 16;  // node width of the first cell
  double gamma = 1.0;      // provenance only
  bool stem_group_conv = false;
  int num_classes = 10;
  bool inter_cell_skip = true;
  int stem_multiplier = 3;

  /// Throws std::invalid_argument when num_cells < 3, channels are not a
  /// multiple of 4, or the class count is not positive.
  void validate() const;
};

/// Named variants: "bnas-mini", "bnas-a", "bnas-b", "bnas-c".
NetworkConfig preset(std::string_view name);
std::vector<std::string> preset_names();

/// Reduction cells sit at floor(N/3) and floor(2N/3).
std::array<int, 2> reduction_positions(int num_cells);

/// Grouped stem: 3 groups (one per colour plane) with the output widened 2x,
/// which keeps the stem's float op count below the ungrouped 3 -> 3C stem.
inline constexpr int kStemGroups = 3;
inline constexpr int kStemWiden = 2;
int stem_channels(const NetworkConfig& cfg);

/// Widths and flags of every cell for an input of in_h x in_w pixels.
std::vector<CellPlan> plan_cells(const NetworkConfig& cfg, int in_h, int in_w);

/// Float 3x3 conv followed by batchnorm.
class Stem : public Module {
 public:
  Stem(const NetworkConfig& cfg, bool affine, Rng& rng);
  Tensor forward(const Tensor& x);
  int out_channels() const { return conv_->out_channels(); }
  const Conv2d& conv() const { return *conv_; }

 private:
  Conv2d* conv_;
  BatchNorm2d* bn_;
};

/// Global average pool followed by a float linear layer.
class Classifier : public Module {
 public:
  Classifier(int in_features, int num_classes, Rng& rng);
  Tensor forward(const Tensor& x);

 private:
  Linear* fc_;
};

/// Search-time network: stacked supercells sharing one set of arch logits per cell kind.
class SuperNetwork : public Module {
 public:
  SuperNetwork(const NetworkConfig& cfg, const SearchSpace& space, Rng& rng, int in_h = 32, int in_w = 32);
  /// stem_out, when given, receives the stem activation with retain_grad set.
  Tensor forward(const Tensor& x, const ArchParams& arch, Tensor* stem_out = nullptr);
  const NetworkConfig& config() const { return cfg_; }
  int num_cells() const { return static_cast<int>(cells_.size()); }
  SuperCell& cell(int i) { return *cells_.at(static_cast<std::size_t>(i)); }

 private:
  NetworkConfig cfg_;
  Stem* stem_;
  std::vector<SuperCell*> cells_;
  Classifier* head_;
};

/// Final network built from a genotype.
class Network : public Module {
 public:
  Network(const Genotype& genotype, const NetworkConfig& cfg, Rng& rng, int in_h = 32, int in_w = 32);
  Tensor forward(const Tensor& x, Tensor* stem_out = nullptr);
  const NetworkConfig& config() const { return cfg_; }
  const Genotype& genotype() const { return genotype_; }
  int num_cells() const { return static_cast<int>(cells_.size()); }
  DiscreteCell& cell(int i) { return *cells_.at(static_cast<std::size_t>(i)); }
  int input_height() const { return in_h_; }
  int input_width() const { return in_w_; }

 private:
  Genotype genotype_;
  NetworkConfig cfg_;
  int in_h_, in_w_;
  Stem* stem_;
  std::vector<DiscreteCell*> cells_;
  Classifier* head_;
};

/// Float stem -> a run of identical blocks of one layer kind -> classifier.
/// Used to compare layer kinds in isolation, binary vs float.
class LayerStack : public Module {
 public:
  LayerStack(LayerKind kind, Precision precision, int blocks, int channels, int num_classes, Rng& rng);
  Tensor forward(const Tensor& x);

 private:
  Conv2d* stem_;
  BatchNorm2d* stem_bn_;
  std::vector<OpBlock*> blocks_;
  Classifier* head_;
};

/// Number of scalar entries across all parameters.
std::size_t parameter_count(const Module& m);

}  // namespace bnas
