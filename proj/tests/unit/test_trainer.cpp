#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "bnas/trainer.hpp"
#include "support.hpp"

using namespace bnas;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

NetworkConfig tiny_net() {
  NetworkConfig cfg;
  cfg.num_cells = 3;
  cfg.init_channels = 4;
  cfg.num_classes = 2;
  return cfg;
}

}  // namespace

TEST_CASE("named variants carry the published cell counts and widths") {
  const struct {
    const char* name;
    int cells, channels;
  } rows[]{{"bnas-mini", 10, 24}, {"bnas-a", 20, 36}, {"bnas-b", 12, 64}, {"bnas-c", 16, 108}};
  for (const auto& r : rows) {
    const NetworkConfig cfg = preset(r.name);
    CHECK(cfg.num_cells == r.cells);
    CHECK(cfg.init_channels == r.channels);
    CHECK(cfg.gamma == 1.0);
    CHECK_NOTHROW(cfg.validate());
  }
  CHECK(preset_names().size() == 4);
  CHECK_THROWS_AS(preset("bnas-z"), std::invalid_argument);
}

TEST_CASE("reductions sit at one and two thirds of the depth") {
  CHECK(reduction_positions(20) == std::array<int, 2>{6, 13});
  CHECK(reduction_positions(8) == std::array<int, 2>{2, 5});
  CHECK(reduction_positions(3) == std::array<int, 2>{1, 2});
  const auto plans = plan_cells(preset("bnas-a"), 32, 32);
  int reductions = 0;
  for (const auto& p : plans) reductions += p.reduction;
  CHECK(reductions == 2);
  CHECK(plans[6].reduction);
  CHECK(plans[13].reduction);
}

TEST_CASE("network config validation") {
  NetworkConfig cfg = tiny_net();
  cfg.num_cells = 2;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_net();
  cfg.init_channels = 6;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_net();
  cfg.num_classes = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("an all-zeroise genotype has fewer parameters than an all-conv one") {
  const NetworkConfig cfg = tiny_net();
  const auto zero = build_network(Genotype::uniform(LayerKind::Zeroise), cfg, 1, 8, 8);
  const auto conv = build_network(Genotype::uniform(LayerKind::BinConv3), cfg, 1, 8, 8);
  CHECK(parameter_count(*zero) < parameter_count(*conv));
}

TEST_CASE("cell ops are binary convolutions, not float ones") {
  const auto net = build_network(Genotype::uniform(LayerKind::BinConv5), tiny_net(), 2, 8, 8);
  int blocks = 0;
  net->for_each_module([&](Module& m) {
    if (auto* op = dynamic_cast<OpBlock*>(&m)) {
      ++blocks;
      int floats = 0, binaries = 0;
      op->for_each_module([&](Module& inner) {
        floats += dynamic_cast<Conv2d*>(&inner) != nullptr;
        binaries += dynamic_cast<BinConv2d*>(&inner) != nullptr;
      });
      CHECK(floats == 0);
      CHECK(binaries == 1);
    }
  });
  CHECK(blocks == 3 * 2 * kIntermediateNodes);
}

TEST_CASE("the grouped stem costs no more float MACs than the plain stem") {
  NetworkConfig plain = tiny_net();
  plain.init_channels = 16;
  NetworkConfig grouped = plain;
  grouped.stem_group_conv = true;
  Rng r1(0), r2(0);
  const Stem a(plain, true, r1), b(grouped, true, r2);
  // Per output pixel the MAC count equals the weight count.
  CHECK(b.conv().weight().numel() <= a.conv().weight().numel());
  CHECK(b.out_channels() == 2 * a.out_channels());
  CHECK(b.conv().spec().groups == 3);
}

TEST_CASE("training schemes") {
  const TrainScheme s = TrainScheme::standard(100);
  CHECK(s.optimizer.kind == OptimizerKind::SgdMomentum);
  CHECK(s.optimizer.momentum == doctest::Approx(0.9));
  CHECK(s.optimizer.weight_decay == doctest::Approx(3e-6));
  CHECK(s.batch_size == 256);
  CHECK(s.augment == AugmentSet::FlipCropJitter);
  CHECK(s.schedule.kind == ScheduleKind::OneCycle);
  CHECK(lr_at(s.schedule, 30) == doctest::Approx(5e-2));
  CHECK(lr_at(s.schedule, 99) >= 4e-4f);
  for (int e = 0; e < 100; ++e) CHECK(lr_at(s.schedule, e) <= lr_at(s.schedule, 30));

  const TrainScheme m = TrainScheme::minimal(50);
  CHECK(m.optimizer.kind == OptimizerKind::Adam);
  CHECK(m.optimizer.lr == doctest::Approx(1e-3));
  CHECK(m.optimizer.weight_decay == 0.0f);
  CHECK(m.schedule.kind == ScheduleKind::Cosine);
  CHECK(m.augment == AugmentSet::FlipCrop);
  CHECK(TrainScheme::minimal_longer(50).epochs == 100);
  CHECK(TrainScheme::make(SchemeKind::MinimalLonger, 50).schedule.total_epochs == 100);

  CHECK(scheme_kind_from_string("minimal-longer") == SchemeKind::MinimalLonger);
  CHECK(scheme_kind_from_string(to_string(SchemeKind::Standard)) == SchemeKind::Standard);
  CHECK_THROWS_AS(scheme_kind_from_string("fast"), std::invalid_argument);

  TrainScheme bad = TrainScheme::minimal(5);
  bad.batch_size = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = TrainScheme::minimal(5);
  bad.epochs = 6;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("curve rows") {
  CHECK(curve_csv_header() == "epoch,train_acc,test_acc,lr\n");
  CHECK(curve_csv_row({3, 0.5, 0.25, 0.001, 1.0}) == "3,0.500000,0.250000,0.001\n");
}

TEST_CASE("underfitting looks at the last quarter") {
  std::vector<EpochRecord> curve(8);
  for (int i = 0; i < 8; ++i) curve[static_cast<std::size_t>(i)] = {i, 0.9, 0.5, 0.1, 0.0};
  CHECK_FALSE(underfitting(curve));
  curve[6].test_acc = curve[7].test_acc = 0.95;  // both tail epochs
  CHECK(underfitting(curve));
  curve[6].test_acc = 0.5;  // one of two is not more than half
  CHECK_FALSE(underfitting(curve));
  // Early epochs do not count.
  for (int i = 0; i < 6; ++i) curve[static_cast<std::size_t>(i)].test_acc = 1.0;
  CHECK_FALSE(underfitting(curve));
  CHECK_FALSE(underfitting({}));
}

TEST_CASE("spike fraction against the running median") {
  CHECK(spike_fraction(std::vector<double>{1.0}) == 0.0);
  // Steps 2..5 compared with medians 1, 1.5, 1, 1.5 of the earlier norms.
  const std::vector<double> norms{1.0, 2.0, 1.0, 50.0, 1.0};
  CHECK(spike_fraction(norms) == doctest::Approx(0.25));
  CHECK(spike_fraction(norms, 100.0) == 0.0);
  const std::vector<double> flat(20, 3.0);
  CHECK(spike_fraction(flat) == 0.0);
}

TEST_CASE("gradient logs round-trip") {
  GradLog log;
  log.names = {"stem.conv.weight", "classifier.fc.bias"};
  log.steps = {{1.0f, 2.5f}, {0.25f, 0.0f}, {3.0f, 4.0f}};
  const auto path = testing::temp_dir("gradlog") / "grads.bin";
  log.save(path);
  const std::string bytes = read_file(path);
  CHECK(bytes.substr(0, 8) == "BNASGRAD");
  const GradLog back = GradLog::load(path);
  CHECK(back.names == log.names);
  CHECK(back.steps == log.steps);
  std::ofstream(path, std::ios::binary) << "NOTAGRAD";
  CHECK_THROWS_AS(GradLog::load(path), IoError);
}

TEST_CASE("accuracy and prediction") {
  CHECK(accuracy(std::vector<int>{1, 0, 1, 1}, std::vector<int>{1, 1, 1, 0}) == doctest::Approx(0.5));
  CHECK_THROWS(accuracy(std::vector<int>{1}, std::vector<int>{1, 0}));
  const auto net = build_network(Genotype::uniform(LayerKind::BinConv3), tiny_net(), 4, 8, 8);
  const Dataset ds = synthetic_blobs(2, 10, 3, 0.2f, 8);
  const auto a = predict(*net, [&](const Tensor& x) { return net->forward(x); }, ds, 4);
  const auto b = predict(*net, [&](const Tensor& x) { return net->forward(x); }, ds, 7);
  CHECK(a.size() == 10);
  CHECK(a == b);  // eval mode: batching does not matter
  CHECK(net->training());
}

TEST_CASE("a single binary block fits a small two-class set") {
  Rng rng(11);
  LayerStack model(LayerKind::BinConv3, Precision::Binary, 1, 8, 2, rng);
  const Dataset data = synthetic_blobs(2, 200, 12, 0.3f, 8);
  TrainScheme scheme = TrainScheme::minimal(30);
  scheme.batch_size = 32;
  scheme.augment = AugmentSet::None;
  scheme.optimizer.lr = scheme.schedule.lr_max = 1e-2f;
  TrainOptions opts;
  opts.seed = 5;
  const auto result = train(model, [&](const Tensor& x) { return model.forward(x); }, scheme, data, data, opts);
  CHECK(result.curve.size() == 30);
  CHECK(result.final_test_acc() >= 0.95);
}

TEST_CASE("training is deterministic and writes its artifacts") {
  const Dataset tr = synthetic_blobs(2, 24, 21, 0.2f, 8);
  const Dataset te = synthetic_blobs(2, 12, 22, 0.2f, 8);
  TrainScheme scheme = TrainScheme::minimal(2);
  scheme.batch_size = 8;
  auto run = [&](const std::filesystem::path& dir) {
    auto net = build_network(Genotype::uniform(LayerKind::BinConv3), tiny_net(), 3, 8, 8);
    TrainOptions opts;
    opts.seed = 9;
    opts.out_dir = dir;
    opts.log_grad_norms = true;
    return train(*net, scheme, tr, te, opts);
  };
  const auto d1 = testing::temp_dir("train_a"), d2 = testing::temp_dir("train_b");
  const auto r1 = run(d1), r2 = run(d2);
  CHECK(r1.step_grad_norms == r2.step_grad_norms);
  CHECK(read_file(d1 / "curve.csv") == read_file(d2 / "curve.csv"));
  CHECK(read_file(d1 / "model.ckpt") == read_file(d2 / "model.ckpt"));
  CHECK(read_file(d1 / "curve.csv").rfind(curve_csv_header(), 0) == 0);
  const GradLog log = GradLog::load(d1 / "grads.bin");
  CHECK(log.steps.size() == r1.step_grad_norms.size());
  CHECK(log.steps.size() == 6);
  CHECK_FALSE(log.names.empty());
}

TEST_CASE("divergence stops training with a snapshot") {
  const Dataset tr = synthetic_blobs(2, 16, 31, 0.2f, 8);
  TrainScheme scheme = TrainScheme::standard(2);
  scheme.batch_size = 8;
  scheme.grad_clip = 0.0f;
  scheme.optimizer.lr = scheme.schedule.lr_max = 1e30f;
  auto net = build_network(Genotype::uniform(LayerKind::BinConv3), tiny_net(), 3, 8, 8);
  TrainOptions opts;
  opts.out_dir = testing::temp_dir("train_div");
  try {
    train(*net, scheme, tr, tr, opts);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::filesystem::exists(e.snapshot));
  }
}
