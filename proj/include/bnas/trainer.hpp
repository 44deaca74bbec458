#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bnas/data.hpp"
#include "bnas/network.hpp"
#include "bnas/optim.hpp"
#include "bnas/search.hpp"

namespace bnas {

enum class SchemeKind { Standard, Minimal, MinimalLonger };
std::string_view to_string(SchemeKind kind);
/// Accepts "standard", "minimal", "minimal-longer".
SchemeKind scheme_kind_from_string(std::string_view name);

struct TrainScheme {
  SchemeKind kind = SchemeKind::Standard;
  int epochs = 600;
  int batch_size = 256;
  OptimizerOptions optimizer;
  LrSchedule schedule;
  AugmentSet augment = AugmentSet::FlipCropJitter;
  float grad_clip = 5.0f;  // <= 0 disables clipping

  /// SGD(0.9), wd 3e-6, one-cycle 5e-2 -> 4e-4, flip + crop + jitter.
  static TrainScheme standard(int epochs = 600);
  /// Adam 1e-3, no weight decay, cosine without restarts, flip + crop.
  static TrainScheme minimal(int epochs = 600);
  /// minimal() with twice the epochs.
  static TrainScheme minimal_longer(int epochs = 600);
  static TrainScheme make(SchemeKind kind, int epochs);

  void validate() const;
};

std::unique_ptr<Network> build_network(const Genotype& genotype, const NetworkConfig& cfg, std::uint64_t seed,
                                       int in_h = kCifarSide, int in_w = kCifarSide);

struct EpochRecord {
  int epoch = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double lr = 0.0;
  double train_loss = 0.0;
};

std::string curve_csv_header();
std::string curve_csv_row(const EpochRecord& r);

struct TrainOptions {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;  // empty: nothing written
  bool log_grad_norms = false;    // per-parameter norms to <out_dir>/grads.bin
  int max_steps_per_epoch = 0;    // 0 = full pass
  int eval_batch_size = 256;
};

struct TrainResult {
  std::vector<EpochRecord> curve;
  std::vector<double> step_grad_norms;  // global norm before clipping, one per step
  bool underfitting = false;
  double spike_fraction = 0.0;
  double final_train_acc() const { return curve.empty() ? 0.0 : curve.back().train_acc; }
  double final_test_acc() const { return curve.empty() ? 0.0 : curve.back().test_acc; }
};

using ForwardFn = std::function<Tensor(const Tensor&)>;

/// Trains `model` with the scheme and evaluates on `test` after every epoch.
/// Writes curve.csv, model.ckpt and (optionally) grads.bin into out_dir.
TrainResult train(Module& model, const ForwardFn& forward, const TrainScheme& scheme, const Dataset& train_set,
                  const Dataset& test_set, const TrainOptions& options);
TrainResult train(Network& net, const TrainScheme& scheme, const Dataset& train_set, const Dataset& test_set,
                  const TrainOptions& options);

/// Eval-mode predicted class per sample.
std::vector<int> predict(Module& model, const ForwardFn& forward, const Dataset& ds, int batch_size = 256);
double accuracy(std::span<const int> predictions, std::span<const int> labels);

/// train_acc < test_acc in more than half of the last quarter of epochs.
bool underfitting(std::span<const EpochRecord> curve);
/// Share of steps whose norm exceeds `factor` times the median of all earlier steps.
double spike_fraction(std::span<const double> norms, double factor = 10.0);

inline constexpr char kGradLogMagic[] = "BNASGRAD";

/// Per-parameter gradient L2 norms, one record per step.
struct GradLog {
  std::vector<std::string> names;
  std::vector<std::vector<float>> steps;  // steps[s][k] = norm of parameter k at step s

  void save(const std::filesystem::path& path) const;
  static GradLog load(const std::filesystem::path& path);
};

}  // namespace bnas
