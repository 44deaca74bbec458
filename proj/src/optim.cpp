#include "bnas/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace bnas {

Optimizer::Optimizer(std::vector<Tensor> params, OptimizerOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    first_.emplace_back(p.numel(), 0.0f);
    second_.emplace_back(options_.kind == OptimizerKind::Adam ? p.numel() : 0, 0.0f);
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Optimizer::step() {
  ++steps_;
  const float lr = options_.lr, wd = options_.weight_decay;
  const double bc1 = 1.0 - std::pow(static_cast<double>(options_.beta1), static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(options_.beta2), static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    auto w = p.data();
    const auto g = p.grad();
    const bool has = p.has_grad();
    auto& m = first_[k];
    if (options_.kind == OptimizerKind::SgdMomentum) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        const float gi = (has ? g[i] : 0.0f) + wd * w[i];
        m[i] = options_.momentum * m[i] + gi;
        w[i] -= lr * m[i];
      }
    } else {
      auto& v = second_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const float gi = (has ? g[i] : 0.0f) + wd * w[i];
        m[i] = options_.beta1 * m[i] + (1.0f - options_.beta1) * gi;
        v[i] = options_.beta2 * v[i] + (1.0f - options_.beta2) * gi * gi;
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + options_.eps));
      }
    }
  }
}

double grad_norm(const std::vector<Tensor>& params) {
  double ss = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) ss += static_cast<double>(g) * g;
  }
  return std::sqrt(ss);
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const float factor = static_cast<float>(max_norm / (norm + 1e-6));
    for (auto p : params) {
      if (!p.has_grad()) continue;
      for (float& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

float lr_at(const LrSchedule& s, int epoch) {
  if (s.total_epochs < 1 || epoch < 0 || epoch >= s.total_epochs) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside schedule of " + std::to_string(s.total_epochs) +
                            " epochs");
  }
  const double lo = s.lr_min, hi = s.lr_max;
  auto cosine = [&](double t_cur, double length) {
    return lo + 0.5 * (hi - lo) * (1.0 + std::cos(std::numbers::pi * t_cur / length));
  };
  double lr = hi;
  switch (s.kind) {
    case ScheduleKind::Constant:
      lr = hi;
      break;
    case ScheduleKind::Cosine:
      lr = cosine(epoch, s.total_epochs);
      break;
    case ScheduleKind::CosineWarmRestarts: {
      if (s.cycle_length < 1) throw std::out_of_range("cycle_length must be positive");
      lr = cosine(epoch % s.cycle_length, s.cycle_length);
      break;
    }
    case ScheduleKind::OneCycle: {
      const int peak = std::max(1, static_cast<int>(std::lround(s.warmup_fraction * s.total_epochs)));
      if (epoch <= peak) {
        lr = lo + (hi - lo) * static_cast<double>(epoch) / peak;
      } else {
        lr = cosine(epoch - peak, std::max(1, s.total_epochs - peak));
      }
      break;
    }
  }
  return static_cast<float>(std::clamp(lr, lo, hi));
}

std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Constant: return "constant";
    case ScheduleKind::Cosine: return "cosine";
    case ScheduleKind::CosineWarmRestarts: return "cosine-warm-restarts";
    case ScheduleKind::OneCycle: return "one-cycle";
  }
  return "cosine";
}

ScheduleKind schedule_kind_from_string(std::string_view name) {
  if (name == "constant") return ScheduleKind::Constant;
  if (name == "cosine") return ScheduleKind::Cosine;
  if (name == "cosine-warm-restarts") return ScheduleKind::CosineWarmRestarts;
  if (name == "one-cycle") return ScheduleKind::OneCycle;
  throw std::invalid_argument("unknown lr schedule '" + std::string(name) + "'");
}

}  // namespace bnas
