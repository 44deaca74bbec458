#include "bnas/network.hpp"

#include <stdexcept>

namespace bnas {

void NetworkConfig::validate() const {
  if (num_cells < 3) throw std::invalid_argument("num_cells must be at least 3 (two reduction positions), got " + std::to_string(num_cells));
  if (init_channels <= 0 || init_channels % 4 != 0) {
    throw std::invalid_argument("init_channels must be a positive multiple of 4, got " + std::to_string(init_channels));
  }
  if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
  if (stem_multiplier < 1) throw std::invalid_argument("stem_multiplier must be positive");
}

namespace {

struct PresetRow {
  const char* name;
  int cells;
  int channels;
  double gamma;
};

constexpr PresetRow kPresets[] = {
    {"bnas-mini", 10, 24, 1.0},
    {"bnas-a", 20, 36, 1.0},
    {"bnas-b", 12, 64, 1.0},
    {"bnas-c", 16, 108, 1.0},
};

}  // namespace

NetworkConfig preset(std::string_view name) {
  for (const auto& row : kPresets) {
    if (name == row.name) {
      NetworkConfig cfg;
      cfg.name = row.name;
      cfg.num_cells = row.cells;
      cfg.init_channels = row.channels;
      cfg.gamma = row.gamma;
      return cfg;
    }
  }
  throw std::invalid_argument("unknown preset '" + std::string(name) + "'");
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& row : kPresets) out.emplace_back(row.name);
  return out;
}

std::array<int, 2> reduction_positions(int num_cells) { return {num_cells / 3, 2 * num_cells / 3}; }

int stem_channels(const NetworkConfig& cfg) {
  const int base = cfg.stem_multiplier * cfg.init_channels;
  return cfg.stem_group_conv ? base * kStemWiden : base;
}

std::vector<CellPlan> plan_cells(const NetworkConfig& cfg, int in_h, int in_w) {
  cfg.validate();
  const auto reductions = reduction_positions(cfg.num_cells);
  int prev_prev = stem_channels(cfg), prev = prev_prev, channels = cfg.init_channels;
  bool reduction_prev = false;
  std::vector<CellPlan> plans;
  for (int i = 0; i < cfg.num_cells; ++i) {
    const bool reduction = i == reductions[0] || i == reductions[1];
    if (reduction) {
      channels *= 2;
      if (in_h % 2 != 0 || in_w % 2 != 0) {
        throw std::invalid_argument("input extent " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                                    " cannot be halved at cell " + std::to_string(i));
      }
    }
    plans.push_back({prev_prev, prev, channels, reduction, reduction_prev, in_h, in_w});
    if (reduction) {
      in_h /= 2;
      in_w /= 2;
    }
    reduction_prev = reduction;
    prev_prev = prev;
    prev = kIntermediateNodes * channels;
  }
  return plans;
}

Stem::Stem(const NetworkConfig& cfg, bool affine, Rng& rng) {
  const int out = stem_channels(cfg);
  const ops::Conv2dSpec spec{1, 1, 1, cfg.stem_group_conv ? kStemGroups : 1};
  conv_ = register_module("conv", std::make_unique<Conv2d>(3, out, 3, spec, rng));
  bn_ = register_module("bn", std::make_unique<BatchNorm2d>(out, affine));
}

Tensor Stem::forward(const Tensor& x) { return bn_->forward(conv_->forward(x)); }

Classifier::Classifier(int in_features, int num_classes, Rng& rng) {
  fc_ = register_module("fc", std::make_unique<Linear>(in_features, num_classes, rng));
}

Tensor Classifier::forward(const Tensor& x) { return fc_->forward(ops::global_avg_pool(x)); }

SuperNetwork::SuperNetwork(const NetworkConfig& cfg, const SearchSpace& space, Rng& rng, int in_h, int in_w)
    : cfg_(cfg) {
  const auto plans = plan_cells(cfg, in_h, in_w);
  stem_ = register_module("stem", std::make_unique<Stem>(cfg, false, rng));
  for (std::size_t i = 0; i < plans.size(); ++i) {
    cells_.push_back(register_module("cells." + std::to_string(i),
                                     std::make_unique<SuperCell>(plans[i], space, cfg.inter_cell_skip, rng)));
  }
  head_ = register_module("classifier", std::make_unique<Classifier>(cells_.back()->out_channels(), cfg.num_classes, rng));
}

Tensor SuperNetwork::forward(const Tensor& x, const ArchParams& arch, Tensor* stem_out) {
  Tensor s = stem_->forward(x);
  if (stem_out) {
    s.retain_grad();
    *stem_out = s;
  }
  const Tensor w_normal = arch.weights(CellKind::Normal);
  const Tensor w_reduce = arch.weights(CellKind::Reduction);
  Tensor s0 = s, s1 = s;
  for (SuperCell* cell : cells_) {
    Tensor next = cell->forward(s0, s1, cell->plan().reduction ? w_reduce : w_normal);
    s0 = std::move(s1);
    s1 = std::move(next);
  }
  return head_->forward(s1);
}

Network::Network(const Genotype& genotype, const NetworkConfig& cfg, Rng& rng, int in_h, int in_w)
    : genotype_(genotype), cfg_(cfg), in_h_(in_h), in_w_(in_w) {
  genotype.validate();
  const auto plans = plan_cells(cfg, in_h, in_w);
  stem_ = register_module("stem", std::make_unique<Stem>(cfg, true, rng));
  for (std::size_t i = 0; i < plans.size(); ++i) {
    const CellGenotype& cg = genotype.cell(plans[i].reduction ? CellKind::Reduction : CellKind::Normal);
    cells_.push_back(register_module("cells." + std::to_string(i),
                                     std::make_unique<DiscreteCell>(plans[i], cg, cfg.inter_cell_skip, rng)));
  }
  head_ = register_module("classifier", std::make_unique<Classifier>(cells_.back()->out_channels(), cfg.num_classes, rng));
}

Tensor Network::forward(const Tensor& x, Tensor* stem_out) {
  Tensor s = stem_->forward(x);
  if (stem_out) {
    s.retain_grad();
    *stem_out = s;
  }
  Tensor s0 = s, s1 = s;
  for (DiscreteCell* cell : cells_) {
    Tensor next = cell->forward(s0, s1);
    s0 = std::move(s1);
    s1 = std::move(next);
  }
  return head_->forward(s1);
}

LayerStack::LayerStack(LayerKind kind, Precision precision, int blocks, int channels, int num_classes, Rng& rng) {
  if (kind == LayerKind::Zeroise) throw std::invalid_argument("LayerStack: Zeroise has no signal to stack");
  stem_ = register_module("stem", std::make_unique<Conv2d>(3, channels, 3, ops::Conv2dSpec{1, 1, 1, 1}, rng));
  stem_bn_ = register_module("stem_bn", std::make_unique<BatchNorm2d>(channels, true));
  for (int i = 0; i < blocks; ++i) {
    blocks_.push_back(register_module("blocks." + std::to_string(i),
                                      std::make_unique<OpBlock>(kind, channels, channels, 1, true, precision, rng)));
  }
  head_ = register_module("classifier", std::make_unique<Classifier>(channels, num_classes, rng));
}

Tensor LayerStack::forward(const Tensor& x) {
  Tensor h = stem_bn_->forward(stem_->forward(x));
  for (OpBlock* b : blocks_) h = b->forward(h);
  return head_->forward(h);
}

std::size_t parameter_count(const Module& m) {
  std::size_t n = 0;
  for (const auto& t : m.parameters()) n += t.numel();
  return n;
}

}  // namespace bnas
