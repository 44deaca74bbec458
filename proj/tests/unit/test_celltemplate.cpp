#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "bnas/checkpoint.hpp"
#include "bnas/network.hpp"
#include "support.hpp"

using namespace bnas;
using testing::random_tensor;

namespace {

// Exposes the preprocessing step so tests can recompute a cell by hand.
struct OpenSuperCell : SuperCell {
  using SuperCell::SuperCell;
  using CellBase::preprocess;
};

Tensor one_hot_rows(const std::vector<int>& choice, int n_ops) {
  std::vector<float> w(choice.size() * static_cast<std::size_t>(n_ops), 0.0f);
  for (std::size_t e = 0; e < choice.size(); ++e) w[e * static_cast<std::size_t>(n_ops) + static_cast<std::size_t>(choice[e])] = 1.0f;
  return Tensor::from({static_cast<int>(choice.size()), n_ops}, std::move(w));
}

bool same(const Tensor& a, const Tensor& b, double tol) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::abs(a.data()[i] - b.data()[i]) > tol * (1.0 + std::abs(b.data()[i]))) return false;
  return true;
}

CellGenotype sample_cell() {
  // Two inputs per node, mixed kinds.
  return {{{0, LayerKind::BinConv3},
           {1, LayerKind::MaxPool3},
           {1, LayerKind::BinDilConv3},
           {2, LayerKind::Zeroise},
           {0, LayerKind::AvgPool3},
           {3, LayerKind::BinConv5},
           {4, LayerKind::BinDilConv5},
           {2, LayerKind::BinConv3}}};
}

}  // namespace

TEST_CASE("fourteen edges in node-major order") {
  const auto& edges = cell_edges();
  int count = 0;
  for (int node = 0; node < kIntermediateNodes; ++node) count += node + 2;
  CHECK(count == kCellEdges);
  for (int e = 0; e < kCellEdges; ++e) {
    CHECK(edges[static_cast<std::size_t>(e)].source < edges[static_cast<std::size_t>(e)].target + 2);
    CHECK(edge_index(edges[static_cast<std::size_t>(e)].target, edges[static_cast<std::size_t>(e)].source) == e);
  }
  CHECK(edge_index(3, 4) == 13);
  CHECK_THROWS_AS(edge_index(0, 2), std::out_of_range);
  CHECK(edge_stride(CellKind::Reduction, 0) == 2);
  CHECK(edge_stride(CellKind::Reduction, 1) == 2);
  CHECK(edge_stride(CellKind::Reduction, 2) == 1);
  CHECK(edge_stride(CellKind::Normal, 0) == 1);
}

TEST_CASE("genotype JSON round trip is byte stable") {
  Genotype g;
  g.normal = sample_cell();
  g.reduce = Genotype::uniform(LayerKind::MaxPool3).reduce;
  g.gamma = 3.0;
  g.seed = 42;
  const std::string text = g.to_json();
  CHECK(text.find("\"version\"") < text.find("\"normal\""));
  CHECK(text.find("\"normal\"") < text.find("\"reduce\""));
  CHECK(text.find("\"reduce\"") < text.find("\"gamma\""));
  CHECK(text.find("\"gamma\"") < text.find("\"seed\""));
  const Genotype back = Genotype::from_json(text);
  CHECK(back == g);
  CHECK(back.to_json() == text);
  g.gamma = std::numeric_limits<double>::infinity();
  CHECK(Genotype::from_json(g.to_json()).gamma == g.gamma);
  CHECK(g.count(LayerKind::Zeroise) == 1);
}

TEST_CASE("genotype validation") {
  Genotype g = Genotype::uniform(LayerKind::BinConv3);
  CHECK_NOTHROW(g.validate());
  g.normal[1].source = g.normal[0].source;
  CHECK_THROWS_AS(g.validate(), GenotypeError);
  g = Genotype::uniform(LayerKind::BinConv3);
  g.reduce[0].source = 2;  // node 0 only sees sources 0 and 1
  CHECK_THROWS_AS(g.validate(), GenotypeError);
  CHECK_THROWS_AS(Genotype::from_json("{\"normal\": 3}"), GenotypeError);
  CHECK_THROWS_AS(Genotype::from_json("not json"), GenotypeError);
  Rng rng(1);
  const CellPlan plan{8, 8, 4, false, false, 6, 6};
  CellGenotype bad = sample_cell();
  bad[0].source = 5;
  CHECK_THROWS_AS(DiscreteCell(plan, bad, true, rng), GenotypeError);
}

TEST_CASE("arch weights are distributions per edge") {
  Rng rng(3);
  ArchParams arch(SearchSpace::standard(), rng, 1.0f);
  for (auto kind : {CellKind::Normal, CellKind::Reduction}) {
    const auto probs = arch.probabilities(kind);
    REQUIRE(probs.size() == 14);
    for (const auto& row : probs) {
      double s = 0;
      for (float p : row) s += p;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("all-zeroise supercell reduces to the skip path") {
  Rng rng(4);
  const CellPlan plan{8, 16, 4, false, false, 6, 6};
  SuperCell cell(plan, SearchSpace::standard(), true, rng);
  const Tensor pp = random_tensor({2, 8, 6, 6}, 5), p = random_tensor({2, 16, 6, 6}, 6);
  const Tensor w = one_hot_rows(std::vector<int>(14, 6), 7);
  const Tensor y = cell.forward(pp, p, w);
  REQUIRE(cell.skip().is_identity());
  CHECK(same(y, p, 0.0));
}

TEST_CASE("uniform weights average the candidate outputs") {
  Rng rng(7);
  const CellPlan plan{8, 8, 4, false, false, 6, 6};
  OpenSuperCell cell(plan, SearchSpace::standard(), true, rng);
  const Tensor pp = random_tensor({2, 8, 6, 6}, 8), p = random_tensor({2, 8, 6, 6}, 9);
  const Tensor uniform = Tensor::full({14, 7}, 1.0f / 7.0f);
  const Tensor y = cell.forward(pp, p, uniform);

  // By hand: every edge is the plain mean of its seven block outputs.
  auto [s0, s1] = cell.preprocess(pp, p);
  std::vector<Tensor> states{s0, s1};
  for (int node = 0; node < 4; ++node) {
    Tensor acc = Tensor::zeros(s0.shape());
    for (int src = 0; src < node + 2; ++src) {
      for (int op = 0; op < 6; ++op) {  // op 6 is Zeroise
        acc = ops::add(acc, ops::scale(cell.block(edge_index(node, src), op).forward(states[static_cast<std::size_t>(src)]), 1.0f / 7.0f));
      }
    }
    states.push_back(acc);
  }
  const Tensor ref = ops::add(ops::concat_channels({states.begin() + 2, states.end()}), cell.skip().forward(p));
  CHECK(same(y, ref, 1e-5));
}

TEST_CASE("discrete cell equals the supercell with one-hot retained edges") {
  const CellPlan plan{8, 8, 4, false, false, 6, 6};
  const CellGenotype geno = sample_cell();
  Rng r1(10), r2(11);
  SuperCell super(plan, SearchSpace::standard(), true, r1);
  DiscreteCell discrete(plan, geno, true, r2);

  // Copy the supercell's weights into the discrete cell. Fresh affine batchnorm
  // (scale 1, shift 0) matches the supercell's plain batchnorm.
  std::map<std::string, Tensor> src;
  for (auto& [name, t] : super.named_parameters()) src[name] = t;
  for (auto& [name, t] : super.named_buffers()) src[name] = t;
  auto copy_into = [&](std::vector<NamedTensor> dst) {
    for (auto& [name, t] : dst) {
      std::string key = name;
      if (name.rfind("node", 0) == 0) {
        const int node = name[4] - '0', slot = name[6] - '0';
        const GenotypeEdge& e = geno[static_cast<std::size_t>(2 * node + slot)];
        key = "edge" + std::to_string(edge_index(node, e.source)) + "." + std::string(to_string(e.op)) + name.substr(7);
      }
      auto it = src.find(key);
      if (it == src.end()) {
        // Only the affine batchnorm scale and shift are absent from the supercell.
        CHECK(name.find("bn") != std::string::npos);
        continue;
      }
      REQUIRE(it->second.shape() == t.shape());
      std::copy(it->second.data().begin(), it->second.data().end(), t.data().begin());
    }
  };
  copy_into(discrete.named_parameters());
  copy_into(discrete.named_buffers());

  std::vector<int> choice(14, SearchSpace::standard().zeroise_index());
  for (int node = 0; node < 4; ++node)
    for (int slot = 0; slot < 2; ++slot) {
      const auto& e = geno[static_cast<std::size_t>(2 * node + slot)];
      choice[static_cast<std::size_t>(edge_index(node, e.source))] = SearchSpace::standard().index_of(e.op);
    }
  const Tensor pp = random_tensor({2, 8, 6, 6}, 12), p = random_tensor({2, 8, 6, 6}, 13);
  const Tensor ys = super.forward(pp, p, one_hot_rows(choice, 7));
  const Tensor yd = discrete.forward(pp, p);
  CHECK(same(yd, ys, 1e-5));
}

TEST_CASE("a cell with the reduction pattern of pooling from c_(k-2) builds and runs") {
  // Reduction cell in the spirit of the published one: c_(k-2) feeds max pools,
  // several Zeroise edges, two inputs per node.
  const CellGenotype reduce{{{0, LayerKind::MaxPool3},
                             {1, LayerKind::Zeroise},
                             {0, LayerKind::MaxPool3},
                             {2, LayerKind::Zeroise},
                             {0, LayerKind::MaxPool3},
                             {3, LayerKind::Zeroise},
                             {0, LayerKind::MaxPool3},
                             {4, LayerKind::Zeroise}}};
  Rng rng(14);
  const CellPlan plan{8, 8, 8, true, false, 8, 8};
  DiscreteCell cell(plan, reduce, true, rng);
  for (int node = 0; node < 4; ++node)
    CHECK(cell.genotype()[static_cast<std::size_t>(2 * node)].source != cell.genotype()[static_cast<std::size_t>(2 * node + 1)].source);
  const Tensor y = cell.forward(random_tensor({2, 8, 8, 8}, 15), random_tensor({2, 8, 8, 8}, 16));
  CHECK(y.shape() == Shape{2, 32, 4, 4});
}

TEST_CASE("skip connection shapes") {
  Rng rng(17);
  InterCellSkip id(16, 16, false, true, rng);
  CHECK(id.is_identity());
  const Tensor x = random_tensor({1, 16, 4, 4}, 18);
  CHECK(same(id.forward(x), x, 0.0));

  InterCellSkip red(4, 8, true, true, rng);
  const Tensor c = Tensor::full({1, 4, 6, 6}, 0.5f);
  const Tensor y = red.forward(c);
  REQUIRE(y.shape() == Shape{1, 8, 3, 3});
  const auto params = red.named_parameters();
  REQUIRE(params.size() == 1);
  const Tensor& w = params[0].second;
  for (int o = 0; o < 8; ++o) {
    double expected = 0;
    for (int i = 0; i < 4; ++i) expected += 0.5 * w.data()[static_cast<std::size_t>(o * 4 + i)];
    for (int k = 0; k < 9; ++k) CHECK(y.data()[static_cast<std::size_t>(o * 9 + k)] == doctest::Approx(expected).epsilon(1e-5));
  }
  InterCellSkip off(16, 16, false, false, rng);
  CHECK_FALSE(off.forward(x).defined());
}

TEST_CASE("channel accounting across the stack") {
  NetworkConfig cfg;
  cfg.num_cells = 6;
  cfg.init_channels = 8;
  const auto plans = plan_cells(cfg, 16, 16);
  REQUIRE(plans.size() == 6);
  const auto red = reduction_positions(6);
  int width = 8, side = 16;
  for (int i = 0; i < 6; ++i) {
    const bool is_red = i == red[0] || i == red[1];
    if (is_red) width *= 2;
    CHECK(plans[static_cast<std::size_t>(i)].channels == width);
    CHECK(plans[static_cast<std::size_t>(i)].reduction == is_red);
    CHECK(plans[static_cast<std::size_t>(i)].in_h == side);
    if (is_red) side /= 2;
    if (i > 0) CHECK(plans[static_cast<std::size_t>(i)].prev_channels == 4 * plans[static_cast<std::size_t>(i - 1)].channels);
  }
}

TEST_CASE("gradient reaches the stem through all-zeroise cells only with skips") {
  for (bool skips : {true, false}) {
    NetworkConfig cfg;
    cfg.num_cells = 8;
    cfg.init_channels = 8;
    cfg.inter_cell_skip = skips;
    Rng rng(19);
    Network net(Genotype::uniform(LayerKind::Zeroise), cfg, rng, 8, 8);
    Tensor stem;
    const Tensor logits = net.forward(random_tensor({2, 3, 8, 8}, 20), &stem);
    backward(ops::sum(ops::mul(logits, random_tensor(logits.shape(), 21))));
    double norm = 0;
    if (stem.has_grad())
      for (float g : stem.grad()) norm += static_cast<double>(g) * g;
    CAPTURE(skips);
    if (skips) CHECK(norm > 0.0);
    else CHECK(norm == 0.0);
  }
}

TEST_CASE("supercell output is differentiable in the logits") {
  // Only the logits of edges into the last node are perturbed: the cell output
  // depends on them smoothly, while earlier nodes pass through sign functions.
  Rng rng(22);
  const CellPlan plan{8, 8, 4, false, false, 5, 5};
  auto cell = std::make_shared<SuperCell>(plan, SearchSpace::standard(), true, rng);
  const Tensor pp = random_tensor({2, 8, 5, 5}, 23), p = random_tensor({2, 8, 5, 5}, 24);
  const Tensor fixed = random_tensor({9, 7}, 25);
  auto f = [cell, pp, p, fixed](const std::vector<Tensor>& in) {
    const Tensor logits = ops::reshape(ops::concat_channels({ops::reshape(fixed, {1, 63, 1, 1}), ops::reshape(in[0], {1, 35, 1, 1})}),
                                       {14, 7});
    return cell->forward(pp, p, ops::softmax(logits));
  };
  const auto r = testing::grad_check(f, {random_tensor({5, 7}, 26, 1.0f, true)});
  CHECK(r.rel_error < 1e-3);
}
