#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bnas/data.hpp"
#include "bnas/network.hpp"
#include "bnas/optim.hpp"

namespace bnas {

/// A training or search loop hit a non-finite loss. `snapshot` names the
/// checkpoint written at the failing step (empty when none was written).
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::filesystem::path snapshot)
      : std::runtime_error(what), snapshot(std::move(snapshot)) {}
  std::filesystem::path snapshot;
};

struct SearchConfig {
  int num_cells = 8;
  int init_channels = 16;
  int epochs = 50;
  int batch_size = 64;
  float weight_lr = 0.025f;
  float weight_lr_min = 0.0f;
  float weight_momentum = 0.9f;
  float weight_decay = 3e-4f;
  double lambda = 1.0;
  double tau = 7.7;
  float arch_lr = 3e-4f;
  float arch_beta1 = 0.5f;
  float arch_beta2 = 0.999f;
  float grad_clip = 5.0f;
  std::uint64_t seed = 0;
  double gamma = 1.0;  // used when exporting the genotype
  bool inter_cell_skip = true;
  std::string space = "standard";
  AugmentSet augment = AugmentSet::FlipCrop;
  int max_steps_per_epoch = 0;  // 0 = one pass over the smaller split

  /// Throws std::invalid_argument unless lambda >= 0, tau > 0, epochs >= 1.
  void validate() const;
  NetworkConfig network(int num_classes) const;
};

/// Entropy (natural log) of one distribution; 0 log 0 = 0.
double entropy(std::span<const double> probs);
/// Mean per-edge entropy over the given edge distributions.
double mean_edge_entropy(const std::vector<std::vector<double>>& edges);
/// Mean per-edge entropy over both cell kinds of `arch`.
double mean_edge_entropy(const ArchParams& arch);
/// exp(-t / tau).
double annealing_factor(int epoch, double tau);
/// -lambda * H * exp(-t / tau) for the given edge distributions, in double precision.
double regularizer_value(const std::vector<std::vector<double>>& edges, int epoch, double lambda, double tau);
/// The same term on the tape, over both cell kinds' softmaxed logits.
Tensor regularizer_term(const ArchParams& arch, int epoch, double lambda, double tau);
/// task_loss - lambda * H(p) * exp(-t / tau).
Tensor diversity_loss(const Tensor& task_loss, const ArchParams& arch, int epoch, double lambda, double tau);

/// Index of the chosen op for one edge: argmax of [p_zeroise / gamma, p_other...],
/// lowest index on ties; Zeroise is never chosen when gamma is infinite.
/// `strength`, when given, receives the winning (adjusted) value.
int select_op(std::span<const double> weights, const SearchSpace& space, double gamma, double* strength = nullptr);
/// Per node, keep the two incoming edges with the largest selected strength.
Genotype derive_genotype(const ArchParams& arch, double gamma);

/// Fraction of edges (both cell kinds) whose plain argmax is a layer with parameters.
double learnable_fraction(const ArchParams& arch);
/// Mean of the per-epoch learnable fractions over the first 20 epochs recorded.
double selection_diversity_metric(std::span<const double> history);

struct EpochMetrics {
  int epoch = 0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double entropy = 0.0;
  double learnable_frac = 0.0;
  double reg_term = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

struct StepStats {
  double val_loss = 0.0;
  double train_loss = 0.0;
  int val_correct = 0;
  int train_correct = 0;
};

/// One search run: supernet weights, arch logits, both optimizers, and the epoch counter.
class Searcher {
 public:
  Searcher(const SearchConfig& cfg, int num_classes, int in_h, int in_w);

  /// Arch step on val_batch with weights frozen, then a weight step on
  /// train_batch with arch logits frozen.
  StepStats step(const Batch& train_batch, const Batch& val_batch);
  /// Arch update only, at the current epoch's regularizer weight.
  double arch_step(const Batch& val_batch, int* correct = nullptr);
  /// Weight update only.
  double weight_step(const Batch& train_batch, int* correct = nullptr);

  /// Paired pass over train/val in seeded order; advances the epoch counter.
  EpochMetrics run_epoch(const Dataset& train, const Dataset& val);
  /// All configured epochs. `on_epoch` sees each epoch's metrics as they land.
  std::vector<EpochMetrics> run(const Dataset& train, const Dataset& val,
                                const std::function<void(const EpochMetrics&)>& on_epoch = {});

  Genotype genotype() const;
  int epoch() const { return epoch_; }
  const SearchConfig& config() const { return cfg_; }
  ArchParams& arch() { return arch_; }
  SuperNetwork& network() { return *net_; }
  /// Where divergence snapshots go; empty disables them.
  void set_snapshot_dir(std::filesystem::path dir) { snapshot_dir_ = std::move(dir); }

 private:
  [[noreturn]] void diverged(const char* phase, const std::exception& cause);

  SearchConfig cfg_;
  Rng rng_;
  ArchParams arch_;
  std::unique_ptr<SuperNetwork> net_;
  Optimizer weight_opt_;
  Optimizer arch_opt_;
  LrSchedule schedule_;
  int epoch_ = 0;
  std::filesystem::path snapshot_dir_;
};

}  // namespace bnas
