#include "bnas/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "bnas/checkpoint.hpp"

namespace bnas {

std::string_view to_string(SchemeKind kind) {
  switch (kind) {
    case SchemeKind::Standard:
      return "standard";
    case SchemeKind::Minimal:
      return "minimal";
    case SchemeKind::MinimalLonger:
      return "minimal-longer";
  }
  return "standard";
}

SchemeKind scheme_kind_from_string(std::string_view name) {
  if (name == "standard") return SchemeKind::Standard;
  if (name == "minimal") return SchemeKind::Minimal;
  if (name == "minimal-longer") return SchemeKind::MinimalLonger;
  throw std::invalid_argument("unknown training scheme '" + std::string(name) + "'");
}

TrainScheme TrainScheme::standard(int epochs) {
  TrainScheme s;
  s.kind = SchemeKind::Standard;
  s.epochs = epochs;
  s.batch_size = 256;
  s.optimizer.kind = OptimizerKind::SgdMomentum;
  s.optimizer.lr = 5e-2f;
  s.optimizer.momentum = 0.9f;
  s.optimizer.weight_decay = 3e-6f;
  s.schedule.kind = ScheduleKind::OneCycle;
  s.schedule.lr_max = 5e-2f;
  s.schedule.lr_min = 4e-4f;
  s.schedule.total_epochs = epochs;
  s.augment = AugmentSet::FlipCropJitter;
  return s;
}

TrainScheme TrainScheme::minimal(int epochs) {
  TrainScheme s;
  s.kind = SchemeKind::Minimal;
  s.epochs = epochs;
  s.batch_size = 256;
  s.optimizer.kind = OptimizerKind::Adam;
  s.optimizer.lr = 1e-3f;
  s.optimizer.weight_decay = 0.0f;
  s.schedule.kind = ScheduleKind::Cosine;
  s.schedule.lr_max = 1e-3f;
  s.schedule.lr_min = 0.0f;
  s.schedule.total_epochs = epochs;
  s.augment = AugmentSet::FlipCrop;
  return s;
}

TrainScheme TrainScheme::minimal_longer(int epochs) {
  TrainScheme s = minimal(2 * epochs);
  s.kind = SchemeKind::MinimalLonger;
  return s;
}

TrainScheme TrainScheme::make(SchemeKind kind, int epochs) {
  switch (kind) {
    case SchemeKind::Standard:
      return standard(epochs);
    case SchemeKind::Minimal:
      return minimal(epochs);
    case SchemeKind::MinimalLonger:
      return minimal_longer(epochs);
  }
  return standard(epochs);
}

void TrainScheme::validate() const {
  if (epochs < 1) throw std::invalid_argument("train epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("train batch_size must be >= 2 (batchnorm needs two samples)");
  if (schedule.total_epochs != epochs) throw std::invalid_argument("lr schedule length must equal the epoch count");
  if (schedule.lr_min > schedule.lr_max) throw std::invalid_argument("lr_min must not exceed lr_max");
}

std::unique_ptr<Network> build_network(const Genotype& genotype, const NetworkConfig& cfg, std::uint64_t seed, int in_h,
                                       int in_w) {
  Rng rng(seed);
  return std::make_unique<Network>(genotype, cfg, rng, in_h, in_w);
}

std::string curve_csv_header() { return "epoch,train_acc,test_acc,lr\n"; }

std::string curve_csv_row(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.8g\n", r.epoch, r.train_acc, r.test_acc, r.lr);
  return buf;
}

std::vector<int> predict(Module& model, const ForwardFn& forward, const Dataset& ds, int batch_size) {
  NoGradGuard no_grad;
  const bool was_training = model.training();
  model.set_training(false);
  std::vector<int> out;
  out.reserve(ds.size());
  Rng unused(0);
  for (std::size_t s = 0; s < ds.size(); s += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(ds.size(), s + static_cast<std::size_t>(batch_size)); ++i) idx.push_back(i);
    const Batch b = make_batch(ds, idx, AugmentSet::None, unused);
    const Tensor logits = forward(b.images);
    const int k = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = logits.data().subspan(i * static_cast<std::size_t>(k), static_cast<std::size_t>(k));
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  model.set_training(was_training);
  return out;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: size mismatch");
  if (labels.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) ok += predictions[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(labels.size());
}

bool underfitting(std::span<const EpochRecord> curve) {
  if (curve.empty()) return false;
  const std::size_t tail = std::max<std::size_t>(1, (curve.size() + 3) / 4);
  std::size_t below = 0;
  for (std::size_t i = curve.size() - tail; i < curve.size(); ++i) below += curve[i].train_acc < curve[i].test_acc;
  return 2 * below > tail;
}

double spike_fraction(std::span<const double> norms, double factor) {
  if (norms.size() < 2) return 0.0;
  std::vector<double> seen{norms[0]};
  std::size_t spikes = 0;
  for (std::size_t i = 1; i < norms.size(); ++i) {
    const std::size_t m = seen.size();
    const double median = m % 2 ? seen[m / 2] : 0.5 * (seen[m / 2 - 1] + seen[m / 2]);
    spikes += norms[i] > factor * median;
    seen.insert(std::upper_bound(seen.begin(), seen.end(), norms[i]), norms[i]);
  }
  return static_cast<double>(spikes) / static_cast<double>(norms.size() - 1);
}

void GradLog::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  binio::write_bytes(os, std::string_view(kGradLogMagic, 8));
  binio::write_u32(os, 1);
  binio::write_u32(os, static_cast<std::uint32_t>(names.size()));
  for (const auto& n : names) {
    binio::write_u32(os, static_cast<std::uint32_t>(n.size()));
    binio::write_bytes(os, n);
  }
  binio::write_u32(os, static_cast<std::uint32_t>(steps.size()));
  for (const auto& s : steps)
    for (float v : s) binio::write_f32(os, v);
  if (!os) throw IoError("short write to " + path.string());
}

GradLog GradLog::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  if (binio::read_bytes(is, 8) != std::string_view(kGradLogMagic, 8)) throw IoError(path.string() + ": not a gradient log");
  if (binio::read_u32(is) != 1) throw IoError(path.string() + ": unsupported gradient log version");
  GradLog log;
  const std::uint32_t n = binio::read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) log.names.push_back(binio::read_bytes(is, binio::read_u32(is)));
  const std::uint32_t steps = binio::read_u32(is);
  log.steps.assign(steps, std::vector<float>(n));
  for (auto& s : log.steps)
    for (float& v : s) v = binio::read_f32(is);
  return log;
}

namespace {

int argmax_row(const Tensor& logits, int i) {
  const int k = logits.dim(1);
  const auto row = logits.data().subspan(static_cast<std::size_t>(i) * k, static_cast<std::size_t>(k));
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

TrainResult train(Module& model, const ForwardFn& forward, const TrainScheme& scheme, const Dataset& train_set,
                  const Dataset& test_set, const TrainOptions& options) {
  scheme.validate();
  if (train_set.size() < 2) throw std::invalid_argument("training set needs at least two samples");
  const auto named = model.named_parameters();
  std::vector<Tensor> params;
  for (const auto& [name, t] : named) params.push_back(t);
  Optimizer opt(params, scheme.optimizer);
  Rng rng(options.seed ^ 0x7261696eULL);
  TrainResult result;
  GradLog grad_log;
  if (options.log_grad_norms) {
    for (const auto& [name, t] : named) grad_log.names.push_back(name);
  }
  if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);
  std::ofstream curve_os;
  if (!options.out_dir.empty()) {
    curve_os.open(options.out_dir / "curve.csv", std::ios::trunc);
    if (!curve_os) throw IoError("cannot write " + (options.out_dir / "curve.csv").string());
    curve_os << curve_csv_header();
  }

  for (int epoch = 0; epoch < scheme.epochs; ++epoch) {
    const float lr = lr_at(scheme.schedule, epoch);
    opt.set_lr(lr);
    model.set_training(true);
    auto batches = shuffled_batches(train_set.size(), scheme.batch_size, rng);
    // A trailing batch of one sample cannot be batch-normalised in train mode.
    if (!batches.empty() && batches.back().size() < 2) batches.pop_back();
    if (options.max_steps_per_epoch > 0 && batches.size() > static_cast<std::size_t>(options.max_steps_per_epoch)) {
      batches.resize(static_cast<std::size_t>(options.max_steps_per_epoch));
    }
    std::size_t correct = 0, seen = 0;
    double loss_sum = 0.0;
    for (const auto& idx : batches) {
      const Batch b = make_batch(train_set, idx, scheme.augment, rng);
      try {
        opt.zero_grad();
        const Tensor logits = forward(b.images);
        const Tensor loss = ops::cross_entropy(logits, b.labels);
        backward(loss);
        const double norm = scheme.grad_clip > 0.0f ? clip_grad_norm(params, scheme.grad_clip) : grad_norm(params);
        if (!std::isfinite(norm)) throw NonFiniteError("non-finite gradient norm");
        result.step_grad_norms.push_back(norm);
        if (options.log_grad_norms) {
          std::vector<float> per;
          per.reserve(params.size());
          for (const auto& p : params) per.push_back(static_cast<float>(grad_norm({p})));
          grad_log.steps.push_back(std::move(per));
        }
        opt.step();
        loss_sum += loss.item() * static_cast<double>(idx.size());
        for (int i = 0; i < logits.dim(0); ++i) correct += argmax_row(logits, i) == b.labels[static_cast<std::size_t>(i)];
        seen += idx.size();
      } catch (const NonFiniteError& e) {
        std::filesystem::path snap;
        if (!options.out_dir.empty()) {
          snap = options.out_dir / ("diverged_epoch" + std::to_string(epoch) + ".ckpt");
          save_checkpoint(snap, module_state(model));
        }
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what(), snap);
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    if (test_set.size() > 0) {
      rec.test_acc = accuracy(predict(model, forward, test_set, options.eval_batch_size), test_set.labels);
    }
    result.curve.push_back(rec);
    if (curve_os.is_open()) {
      curve_os << curve_csv_row(rec);
      curve_os.flush();
    }
  }
  model.set_training(false);
  result.underfitting = underfitting(result.curve);
  result.spike_fraction = spike_fraction(result.step_grad_norms);
  if (!options.out_dir.empty()) {
    save_checkpoint(options.out_dir / "model.ckpt", module_state(model));
    if (options.log_grad_norms) grad_log.save(options.out_dir / "grads.bin");
  }
  return result;
}

TrainResult train(Network& net, const TrainScheme& scheme, const Dataset& train_set, const Dataset& test_set,
                  const TrainOptions& options) {
  return train(net, [&net](const Tensor& x) { return net.forward(x); }, scheme, train_set, test_set, options);
}

}  // namespace bnas
