#include "bnas/cell.hpp"
#include "bnas/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

namespace bnas {

const std::array<CellEdge, kCellEdges>& cell_edges() {
  static const std::array<CellEdge, kCellEdges> edges = [] {
    std::array<CellEdge, kCellEdges> e{};
    int k = 0;
    for (int node = 0; node < kIntermediateNodes; ++node)
      for (int src = 0; src < node + 2; ++src) e[k++] = {src, node};
    return e;
  }();
  return edges;
}

int edge_index(int target, int source) {
  if (target < 0 || target >= kIntermediateNodes || source < 0 || source >= target + 2) {
    throw std::out_of_range("no edge from node " + std::to_string(source) + " to intermediate node " + std::to_string(target));
  }
  return target * (target + 3) / 2 + source;
}

int edge_stride(CellKind kind, int source) { return kind == CellKind::Reduction && source < 2 ? 2 : 1; }

// ---------------------------------------------------------------- Genotype

void Genotype::validate() const {
  for (const CellGenotype* cell : {&normal, &reduce}) {
    for (int node = 0; node < kIntermediateNodes; ++node) {
      const auto& a = (*cell)[2 * node];
      const auto& b = (*cell)[2 * node + 1];
      for (const auto& e : {a, b}) {
        if (e.source < 0 || e.source >= node + 2) {
          throw GenotypeError("intermediate node " + std::to_string(node) + " references out-of-range source " +
                              std::to_string(e.source));
        }
      }
      if (a.source == b.source) {
        throw GenotypeError("intermediate node " + std::to_string(node) + " retains source " + std::to_string(a.source) +
                            " twice");
      }
    }
  }
}

int Genotype::count(LayerKind kind) const {
  int n = 0;
  for (const auto* cell : {&normal, &reduce})
    for (const auto& e : *cell) n += e.op == kind;
  return n;
}

namespace {

nlohmann::ordered_json cell_to_json(const CellGenotype& cell) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : cell) arr.push_back({e.source, std::string(to_string(e.op))});
  return arr;
}

CellGenotype cell_from_json(const nlohmann::json& j, const char* field) {
  if (!j.is_array() || j.size() != 2 * kIntermediateNodes) {
    throw GenotypeError(std::string("genotype field '") + field + "' must list 8 [source, op] pairs");
  }
  CellGenotype cell{};
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& pair = j[i];
    if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_integer() || !pair[1].is_string()) {
      throw GenotypeError(std::string("malformed edge in '") + field + "'");
    }
    try {
      cell[i] = {pair[0].get<int>(), layer_kind_from_string(pair[1].get<std::string>())};
    } catch (const std::invalid_argument& e) {
      throw GenotypeError(e.what());
    }
  }
  return cell;
}

}  // namespace

std::string Genotype::to_json() const {
  nlohmann::ordered_json j;
  j["version"] = version;
  j["normal"] = cell_to_json(normal);
  j["reduce"] = cell_to_json(reduce);
  if (std::isinf(gamma)) {
    j["gamma"] = "inf";
  } else {
    j["gamma"] = gamma;
  }
  j["seed"] = seed;
  j["space"] = space;
  return j.dump(2) + "\n";
}

Genotype Genotype::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw GenotypeError(std::string("genotype is not valid JSON: ") + e.what());
  }
  Genotype g;
  if (!j.is_object() || !j.contains("normal") || !j.contains("reduce")) {
    throw GenotypeError("genotype must be an object with 'normal' and 'reduce'");
  }
  g.version = j.value("version", kGenotypeVersion);
  if (g.version != kGenotypeVersion) throw GenotypeError("unsupported genotype version " + std::to_string(g.version));
  g.normal = cell_from_json(j["normal"], "normal");
  g.reduce = cell_from_json(j["reduce"], "reduce");
  if (j.contains("gamma")) {
    const auto& gm = j["gamma"];
    if (gm.is_string() && gm.get<std::string>() == "inf") {
      g.gamma = std::numeric_limits<double>::infinity();
    } else if (gm.is_number()) {
      g.gamma = gm.get<double>();
    } else {
      throw GenotypeError("genotype 'gamma' must be a number or \"inf\"");
    }
  }
  g.seed = j.value("seed", std::uint64_t{0});
  g.space = j.value("space", std::string("standard"));
  g.validate();
  return g;
}

void Genotype::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write genotype file " + path.string());
  os << to_json();
}

Genotype Genotype::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read genotype file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json(ss.str());
}

Genotype Genotype::uniform(LayerKind kind) {
  Genotype g;
  for (auto* cell : {&g.normal, &g.reduce})
    for (int node = 0; node < kIntermediateNodes; ++node) {
      (*cell)[2 * node] = {0, kind};
      (*cell)[2 * node + 1] = {1, kind};
    }
  return g;
}

// ---------------------------------------------------------------- ArchParams

ArchParams::ArchParams(SearchSpace space, Rng& rng, float init_scale) : space_(std::move(space)) {
  auto init = [&] {
    Tensor t = Tensor::zeros({kCellEdges, space_.size()}, true);
    for (float& v : t.data()) v = init_scale * rng.normal();
    return t;
  };
  normal_ = init();
  reduce_ = init();
}

Tensor ArchParams::weights(CellKind kind) const { return ops::softmax(logits(kind)); }

std::vector<std::vector<float>> ArchParams::probabilities(CellKind kind) const {
  NoGradGuard no_grad;
  const Tensor w = ops::softmax(logits(kind));
  const int n = space_.size();
  std::vector<std::vector<float>> out(kCellEdges);
  for (int e = 0; e < kCellEdges; ++e) out[e].assign(w.data().begin() + e * n, w.data().begin() + (e + 1) * n);
  return out;
}

// ---------------------------------------------------------------- building blocks

BinaryPointwise::BinaryPointwise(int in_ch, int out_ch, bool affine, Rng& rng) {
  bn_ = register_module("bn", std::make_unique<BatchNorm2d>(in_ch, affine));
  conv_ = register_module("conv", std::make_unique<BinConv2d>(in_ch, out_ch, ConvGeometry{1, 1, 1, 0, 1}, rng));
}

Tensor BinaryPointwise::forward(const Tensor& x) { return conv_->forward(bn_->forward(x)); }

FactorizedReduce::FactorizedReduce(int in_ch, int out_ch, bool affine, Rng& rng) {
  if (out_ch % 2 != 0) throw ShapeError("FactorizedReduce needs an even output width");
  const ops::Conv2dSpec spec{2, 0, 1, 1};
  conv_a_ = register_module("conv_a", std::make_unique<Conv2d>(in_ch, out_ch / 2, 1, spec, rng));
  conv_b_ = register_module("conv_b", std::make_unique<Conv2d>(in_ch, out_ch / 2, 1, spec, rng));
  bn_ = register_module("bn", std::make_unique<BatchNorm2d>(out_ch, affine));
}

Tensor FactorizedReduce::forward(const Tensor& x) {
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) throw ShapeError("FactorizedReduce needs even spatial extents");
  const Tensor r = ops::relu(x);
  return bn_->forward(ops::concat_channels({conv_a_->forward(r), conv_b_->forward(ops::crop(r, 1, 1))}));
}

InterCellSkip::InterCellSkip(int in_ch, int out_ch, bool reduction, bool enabled, Rng& rng)
    : reduction_(reduction), enabled_(enabled) {
  if (enabled && (reduction || in_ch != out_ch)) {
    projection_ = register_module("proj", std::make_unique<Conv2d>(in_ch, out_ch, 1, ops::Conv2dSpec{}, rng));
  }
}

Tensor InterCellSkip::forward(const Tensor& x) {
  if (!enabled_) return {};
  Tensor h = reduction_ ? ops::avg_pool2d(x, 3, 2, 1) : x;
  return projection_ ? projection_->forward(h) : h;
}

CellBase::CellBase(const CellPlan& plan, bool skip_enabled, bool affine, Rng& rng) : plan_(plan) {
  if (plan.reduction_prev) {
    pre0_ = register_module("pre0", std::make_unique<FactorizedReduce>(plan.prev_prev_channels, plan.channels, affine, rng));
  } else {
    pre0_ = register_module("pre0", std::make_unique<BinaryPointwise>(plan.prev_prev_channels, plan.channels, affine, rng));
  }
  pre1_ = register_module("pre1", std::make_unique<BinaryPointwise>(plan.prev_channels, plan.channels, affine, rng));
  skip_ = register_module("skip", std::make_unique<InterCellSkip>(plan.prev_channels, kIntermediateNodes * plan.channels,
                                                                   plan.reduction, skip_enabled, rng));
}

std::pair<Tensor, Tensor> CellBase::preprocess(const Tensor& prev_prev, const Tensor& prev) {
  Tensor s0 = plan_.reduction_prev ? static_cast<FactorizedReduce*>(pre0_)->forward(prev_prev)
                                   : static_cast<BinaryPointwise*>(pre0_)->forward(prev_prev);
  Tensor s1 = pre1_->forward(prev);
  if (s0.shape() != s1.shape()) {
    throw ShapeError("cell inputs disagree after preprocessing: " + shape_str(s0.shape()) + " vs " + shape_str(s1.shape()));
  }
  return {std::move(s0), std::move(s1)};
}

Tensor CellBase::finish(std::vector<Tensor> nodes, const Tensor& prev) {
  Tensor body = ops::concat_channels(nodes);
  Tensor shortcut = skip_->forward(prev);
  return shortcut.defined() ? ops::add(body, shortcut) : body;
}

// ---------------------------------------------------------------- SuperCell

SuperCell::SuperCell(const CellPlan& plan, const SearchSpace& space, bool skip_enabled, Rng& rng)
    : CellBase(plan, skip_enabled, false, rng) {
  const CellKind kind = plan.reduction ? CellKind::Reduction : CellKind::Normal;
  for (int e = 0; e < kCellEdges; ++e) {
    const CellEdge edge = cell_edges()[e];
    std::vector<OpBlock*> blocks;
    for (LayerKind op : space.kinds()) {
      blocks.push_back(register_module(
          "edge" + std::to_string(e) + "." + std::string(to_string(op)),
          std::make_unique<OpBlock>(op, plan.channels, plan.channels, edge_stride(kind, edge.source), false,
                                    Precision::Binary, rng)));
    }
    edges_.push_back(std::move(blocks));
  }
}

Tensor SuperCell::forward(const Tensor& prev_prev, const Tensor& prev, const Tensor& weights) {
  if (weights.rank() != 2 || weights.dim(0) != kCellEdges || weights.dim(1) != static_cast<int>(edges_[0].size())) {
    throw ShapeError("SuperCell: arch weights must be [14, n_ops]");
  }
  auto [s0, s1] = preprocess(prev_prev, prev);
  std::vector<Tensor> states{s0, s1};
  for (int node = 0; node < kIntermediateNodes; ++node) {
    std::vector<Tensor> incoming;
    for (int src = 0; src < node + 2; ++src) {
      const int e = edge_index(node, src);
      std::vector<Tensor> outs;
      for (OpBlock* b : edges_[e]) outs.push_back(b->kind() == LayerKind::Zeroise ? Tensor() : b->forward(states[src]));
      // Zeroise contributes zeros; keep its weight slot so the softmax stays normalised.
      if (std::all_of(outs.begin(), outs.end(), [](const Tensor& t) { return !t.defined(); })) {
        outs.front() = edges_[e].front()->forward(states[src]);
      }
      incoming.push_back(ops::weighted_sum(outs, ops::row(weights, e)));
    }
    states.push_back(ops::add_n(incoming));
  }
  return finish({states.begin() + 2, states.end()}, prev);
}

// ---------------------------------------------------------------- DiscreteCell

DiscreteCell::DiscreteCell(const CellPlan& plan, const CellGenotype& genotype, bool skip_enabled, Rng& rng)
    : CellBase(plan, skip_enabled, true, rng), genotype_(genotype) {
  const CellKind kind = plan.reduction ? CellKind::Reduction : CellKind::Normal;
  for (int node = 0; node < kIntermediateNodes; ++node) {
    for (int slot = 0; slot < 2; ++slot) {
      const GenotypeEdge& e = genotype[2 * node + slot];
      if (e.source < 0 || e.source >= node + 2) {
        throw GenotypeError("genotype references out-of-range source " + std::to_string(e.source) + " at node " +
                            std::to_string(node));
      }
      ops_.push_back(register_module(
          "node" + std::to_string(node) + "." + std::to_string(slot),
          std::make_unique<OpBlock>(e.op, plan.channels, plan.channels, edge_stride(kind, e.source), true,
                                    Precision::Binary, rng)));
    }
  }
}

Tensor DiscreteCell::forward(const Tensor& prev_prev, const Tensor& prev) {
  auto [s0, s1] = preprocess(prev_prev, prev);
  std::vector<Tensor> states{s0, s1};
  for (int node = 0; node < kIntermediateNodes; ++node) {
    std::vector<Tensor> terms;
    for (int slot = 0; slot < 2; ++slot) {
      terms.push_back(ops_[2 * node + slot]->forward(states[genotype_[2 * node + slot].source]));
    }
    states.push_back(ops::add_n(terms));
  }
  return finish({states.begin() + 2, states.end()}, prev);
}

}  // namespace bnas
