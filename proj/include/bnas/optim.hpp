#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "bnas/tensor.hpp"

namespace bnas {

enum class OptimizerKind { SgdMomentum, Adam };

struct OptimizerOptions {
  OptimizerKind kind = OptimizerKind::SgdMomentum;
  float lr = 0.025f;
  float momentum = 0.9f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

/// SGD with momentum or Adam over a fixed parameter list. A parameter without a
/// gradient is treated as having a zero gradient.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerOptions options);

  void step();
  void zero_grad();
  void set_lr(float lr) { options_.lr = lr; }
  float lr() const { return options_.lr; }
  const OptimizerOptions& options() const { return options_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  OptimizerOptions options_;
  std::vector<std::vector<float>> first_;   // momentum buffer or Adam m
  std::vector<std::vector<float>> second_;  // Adam v
  long steps_ = 0;
};

/// Global L2 norm of the gradients (absent grads count as zero).
double grad_norm(const std::vector<Tensor>& params);
/// Rescales gradients so the global norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

enum class ScheduleKind { Constant, Cosine, CosineWarmRestarts, OneCycle };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Cosine;
  float lr_min = 0.0f;
  float lr_max = 0.025f;
  int cycle_length = 50;  // epochs per cycle, warm-restart schedule only
  int total_epochs = 50;
  float warmup_fraction = 0.3f;  // one-cycle only
};

/// Learning rate for a 0-based epoch index. Throws std::out_of_range when
/// epoch is outside [0, total_epochs).
float lr_at(const LrSchedule& schedule, int epoch);

std::string_view to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(std::string_view name);

}  // namespace bnas
