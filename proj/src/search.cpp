#include "bnas/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "bnas/checkpoint.hpp"

namespace bnas {

void SearchConfig::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2 (batchnorm needs two samples)");
  if (!(gamma >= 1.0)) throw std::invalid_argument("gamma must be >= 1");
  if (max_steps_per_epoch < 0) throw std::invalid_argument("max_steps_per_epoch must be >= 0");
}

NetworkConfig SearchConfig::network(int num_classes) const {
  NetworkConfig n;
  n.name = "supernet";
  n.num_cells = num_cells;
  n.init_channels = init_channels;
  n.gamma = gamma;
  n.num_classes = num_classes;
  n.inter_cell_skip = inter_cell_skip;
  return n;
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double mean_edge_entropy(const std::vector<std::vector<double>>& edges) {
  if (edges.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : edges) s += entropy(e);
  return s / static_cast<double>(edges.size());
}

namespace {

std::vector<std::vector<double>> edge_distributions(const ArchParams& arch) {
  // Softmax in double from the float logits, so logged values do not inherit float rounding.
  std::vector<std::vector<double>> out;
  const int n = arch.space().size();
  for (CellKind kind : {CellKind::Normal, CellKind::Reduction}) {
    const auto logits = arch.logits(kind).data();
    for (int e = 0; e < kCellEdges; ++e) {
      std::vector<double> p(static_cast<std::size_t>(n));
      double mx = -std::numeric_limits<double>::infinity();
      for (int o = 0; o < n; ++o) mx = std::max(mx, static_cast<double>(logits[e * n + o]));
      double z = 0.0;
      for (int o = 0; o < n; ++o) z += p[o] = std::exp(static_cast<double>(logits[e * n + o]) - mx);
      for (double& v : p) v /= z;
      out.push_back(std::move(p));
    }
  }
  return out;
}

int plain_argmax(std::span<const double> p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace

double mean_edge_entropy(const ArchParams& arch) { return mean_edge_entropy(edge_distributions(arch)); }

double annealing_factor(int epoch, double tau) { return std::exp(-static_cast<double>(epoch) / tau); }

double regularizer_value(const std::vector<std::vector<double>>& edges, int epoch, double lambda, double tau) {
  return -lambda * mean_edge_entropy(edges) * annealing_factor(epoch, tau);
}

Tensor regularizer_term(const ArchParams& arch, int epoch, double lambda, double tau) {
  std::vector<Tensor> per_kind;
  for (CellKind kind : {CellKind::Normal, CellKind::Reduction}) {
    const Tensor& logits = arch.logits(kind);
    // sum over edges and ops of p log p = -(sum of per-edge entropies)
    per_kind.push_back(ops::sum(ops::mul(ops::softmax(logits), ops::log_softmax(logits))));
  }
  const double edges = 2.0 * kCellEdges;
  // -lambda * H * a = lambda * a * (sum p log p) / edges
  return ops::scale(ops::add_n(per_kind), static_cast<float>(lambda * annealing_factor(epoch, tau) / edges));
}

Tensor diversity_loss(const Tensor& task_loss, const ArchParams& arch, int epoch, double lambda, double tau) {
  if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
  if (lambda == 0.0) return task_loss;
  return ops::add(task_loss, regularizer_term(arch, epoch, lambda, tau));
}

int select_op(std::span<const double> weights, const SearchSpace& space, double gamma, double* strength) {
  if (static_cast<int>(weights.size()) != space.size()) throw std::invalid_argument("select_op: weight count != space size");
  if (!(gamma >= 1.0)) throw std::invalid_argument("gamma must be >= 1");
  const int z = space.zeroise_index();
  int best = -1;
  double best_v = -std::numeric_limits<double>::infinity();
  for (int o = 0; o < space.size(); ++o) {
    double v = weights[static_cast<std::size_t>(o)];
    if (o == z) {
      if (std::isinf(gamma)) continue;
      v /= gamma;
    }
    if (v > best_v) {
      best_v = v;
      best = o;
    }
  }
  if (best < 0) throw std::invalid_argument("select_op: no selectable op");
  if (strength) *strength = best_v;
  return best;
}

Genotype derive_genotype(const ArchParams& arch, double gamma) {
  Genotype g;
  g.gamma = gamma;
  g.space = arch.space().version();
  const auto dists = edge_distributions(arch);
  for (CellKind kind : {CellKind::Normal, CellKind::Reduction}) {
    const std::size_t base = kind == CellKind::Normal ? 0 : kCellEdges;
    CellGenotype& cell = g.cell(kind);
    for (int node = 0; node < kIntermediateNodes; ++node) {
      struct Candidate {
        int source, op;
        double strength;
      };
      std::vector<Candidate> cands;
      for (int src = 0; src < node + 2; ++src) {
        double s = 0.0;
        const int op = select_op(dists[base + static_cast<std::size_t>(edge_index(node, src))], arch.space(), gamma, &s);
        cands.push_back({src, op, s});
      }
      std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.strength > b.strength; });
      std::array<Candidate, 2> keep{cands[0], cands[1]};
      if (keep[0].source > keep[1].source) std::swap(keep[0], keep[1]);
      for (int slot = 0; slot < 2; ++slot) {
        cell[static_cast<std::size_t>(2 * node + slot)] = {keep[slot].source, arch.space().at(keep[slot].op)};
      }
    }
  }
  g.validate();
  return g;
}

double learnable_fraction(const ArchParams& arch) {
  const auto dists = edge_distributions(arch);
  int learnable = 0;
  for (const auto& p : dists) learnable += layer_info(arch.space().at(plain_argmax(p))).has_params;
  return static_cast<double>(learnable) / static_cast<double>(dists.size());
}

double selection_diversity_metric(std::span<const double> history) {
  const std::size_t n = std::min<std::size_t>(history.size(), 20);
  if (n == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += history[i];
  return s / static_cast<double>(n);
}

std::string metrics_csv_header() { return "epoch,train_acc,val_acc,entropy,learnable_frac,reg_term\n"; }

std::string metrics_csv_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.6f\n", m.epoch, m.train_acc, m.val_acc, m.entropy,
                m.learnable_frac, m.reg_term);
  return buf;
}

namespace {

int count_correct(const Tensor& logits, std::span<const int> labels) {
  const int n = logits.dim(0), k = logits.dim(1);
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const auto row = logits.data().subspan(static_cast<std::size_t>(i) * k, static_cast<std::size_t>(k));
    correct += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[static_cast<std::size_t>(i)];
  }
  return correct;
}

OptimizerOptions weight_options(const SearchConfig& cfg) {
  OptimizerOptions o;
  o.kind = OptimizerKind::SgdMomentum;
  o.lr = cfg.weight_lr;
  o.momentum = cfg.weight_momentum;
  o.weight_decay = cfg.weight_decay;
  return o;
}

OptimizerOptions arch_options(const SearchConfig& cfg) {
  OptimizerOptions o;
  o.kind = OptimizerKind::Adam;
  o.lr = cfg.arch_lr;
  o.beta1 = cfg.arch_beta1;
  o.beta2 = cfg.arch_beta2;
  o.weight_decay = 0.0f;
  return o;
}

}  // namespace

Searcher::Searcher(const SearchConfig& cfg, int num_classes, int in_h, int in_w)
    : cfg_((cfg.validate(), cfg)),
      rng_(cfg.seed),
      arch_(SearchSpace::by_name(cfg.space), rng_),
      net_(std::make_unique<SuperNetwork>(cfg.network(num_classes), arch_.space(), rng_, in_h, in_w)),
      weight_opt_(net_->parameters(), weight_options(cfg)),
      arch_opt_(arch_.parameters(), arch_options(cfg)) {
  schedule_.kind = ScheduleKind::Cosine;
  schedule_.lr_min = cfg.weight_lr_min;
  schedule_.lr_max = cfg.weight_lr;
  schedule_.total_epochs = cfg.epochs;
}

void Searcher::diverged(const char* phase, const std::exception& cause) {
  std::filesystem::path snap;
  if (!snapshot_dir_.empty()) {
    snap = snapshot_dir_ / ("diverged_epoch" + std::to_string(epoch_) + ".ckpt");
    auto state = module_state(*net_);
    state.emplace_back("arch.normal", arch_.logits(CellKind::Normal));
    state.emplace_back("arch.reduce", arch_.logits(CellKind::Reduction));
    save_checkpoint(snap, state);
  }
  throw DivergenceError(std::string("search diverged during ") + phase + " step at epoch " + std::to_string(epoch_) +
                            ": " + cause.what(),
                        snap);
}

double Searcher::arch_step(const Batch& val_batch, int* correct) {
  try {
    net_->set_training(true);
    arch_opt_.zero_grad();
    const Tensor logits = net_->forward(val_batch.images, arch_);
    const Tensor task = ops::cross_entropy(logits, val_batch.labels);
    const Tensor loss = diversity_loss(task, arch_, epoch_, cfg_.lambda, cfg_.tau);
    backward(loss);
    arch_opt_.step();
    if (correct) *correct = count_correct(logits, val_batch.labels);
    for (auto& p : net_->parameters()) p.clear_grad();
    return task.item();
  } catch (const NonFiniteError& e) {
    diverged("architecture", e);
  }
}

double Searcher::weight_step(const Batch& train_batch, int* correct) {
  try {
    net_->set_training(true);
    weight_opt_.zero_grad();
    const Tensor logits = net_->forward(train_batch.images, arch_);
    const Tensor loss = ops::cross_entropy(logits, train_batch.labels);
    backward(loss);
    if (cfg_.grad_clip > 0.0f) clip_grad_norm(weight_opt_.params(), cfg_.grad_clip);
    weight_opt_.step();
    if (correct) *correct = count_correct(logits, train_batch.labels);
    for (auto& p : arch_.parameters()) p.clear_grad();
    return loss.item();
  } catch (const NonFiniteError& e) {
    diverged("weight", e);
  }
}

StepStats Searcher::step(const Batch& train_batch, const Batch& val_batch) {
  StepStats s;
  s.val_loss = arch_step(val_batch, &s.val_correct);
  s.train_loss = weight_step(train_batch, &s.train_correct);
  return s;
}

EpochMetrics Searcher::run_epoch(const Dataset& train, const Dataset& val) {
  if (epoch_ >= cfg_.epochs) throw std::out_of_range("search already ran all configured epochs");
  weight_opt_.set_lr(lr_at(schedule_, epoch_));
  auto train_batches = shuffled_batches(train.size(), cfg_.batch_size, rng_, true);
  auto val_batches = shuffled_batches(val.size(), cfg_.batch_size, rng_, true);
  std::size_t steps = std::min(train_batches.size(), val_batches.size());
  if (cfg_.max_steps_per_epoch > 0) steps = std::min(steps, static_cast<std::size_t>(cfg_.max_steps_per_epoch));
  if (steps == 0) throw std::invalid_argument("search splits are smaller than one batch");
  long train_correct = 0, val_correct = 0, train_seen = 0, val_seen = 0;
  for (std::size_t i = 0; i < steps; ++i) {
    const Batch tb = make_batch(train, train_batches[i], cfg_.augment, rng_);
    const Batch vb = make_batch(val, val_batches[i], AugmentSet::None, rng_);
    const StepStats s = step(tb, vb);
    train_correct += s.train_correct;
    val_correct += s.val_correct;
    train_seen += static_cast<long>(tb.labels.size());
    val_seen += static_cast<long>(vb.labels.size());
  }
  EpochMetrics m;
  m.epoch = epoch_;
  m.train_acc = static_cast<double>(train_correct) / static_cast<double>(train_seen);
  m.val_acc = static_cast<double>(val_correct) / static_cast<double>(val_seen);
  m.entropy = mean_edge_entropy(arch_);
  m.learnable_frac = learnable_fraction(arch_);
  m.reg_term = regularizer_value(edge_distributions(arch_), epoch_, cfg_.lambda, cfg_.tau);
  ++epoch_;
  return m;
}

std::vector<EpochMetrics> Searcher::run(const Dataset& train, const Dataset& val,
                                        const std::function<void(const EpochMetrics&)>& on_epoch) {
  std::vector<EpochMetrics> history;
  while (epoch_ < cfg_.epochs) {
    history.push_back(run_epoch(train, val));
    if (on_epoch) on_epoch(history.back());
  }
  return history;
}

Genotype Searcher::genotype() const {
  Genotype g = derive_genotype(arch_, cfg_.gamma);
  g.seed = cfg_.seed;
  return g;
}

}  // namespace bnas
