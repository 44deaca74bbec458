#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "bnas/checkpoint.hpp"
#include "bnas/cli.hpp"
#include "bnas/data.hpp"
#include "bnas/deploy.hpp"
#include "bnas/runconfig.hpp"
#include "bnas/search.hpp"
#include "bnas/trainer.hpp"

namespace bnas::cli {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("short write to " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Data {
  Dataset train;
  Dataset test;
};

Data load_data(const RunConfig& cfg) {
  Data d;
  const DataSection& ds = cfg.data;
  if (!ds.cifar_dir.empty()) {
    std::tie(d.train, d.test) = load_cifar10_bin(ds.cifar_dir);
  } else {
    // One draw so train and test share the class prototypes.
    const Dataset all = synthetic_blobs(kCifarClasses, static_cast<std::size_t>(ds.synthetic_train + ds.synthetic_test),
                                        ds.seed, ds.synthetic_noise);
    std::vector<std::size_t> tr(static_cast<std::size_t>(ds.synthetic_train)), te(static_cast<std::size_t>(ds.synthetic_test));
    for (std::size_t i = 0; i < tr.size(); ++i) tr[i] = i;
    for (std::size_t i = 0; i < te.size(); ++i) te[i] = tr.size() + i;
    d.train = all.subset(tr);
    d.test = all.subset(te);
  }
  if (ds.train_subset > 0 && static_cast<std::size_t>(ds.train_subset) < d.train.size()) {
    d.train = stratified_subset(d.train, static_cast<std::size_t>(ds.train_subset), ds.seed);
  }
  if (ds.test_subset > 0 && static_cast<std::size_t>(ds.test_subset) < d.test.size()) {
    d.test = stratified_subset(d.test, static_cast<std::size_t>(ds.test_subset), ds.seed + 1);
  }
  if (ds.downsample > 1) {
    d.train = downsample(d.train, ds.downsample);
    d.test = downsample(d.test, ds.downsample);
  }
  return d;
}

void write_snapshot(const RunConfig& cfg, const fs::path& dir, const std::string& command) {
  fs::create_directories(dir);
  write_text(dir / (command + ".config.toml"), "# resolved configuration of `bnas " + command + "`\n" + cfg.to_toml());
}

struct SearchOutcome {
  std::vector<EpochMetrics> metrics;
  Genotype genotype;
  std::unique_ptr<Searcher> searcher;
};

SearchOutcome run_search(const RunConfig& cfg, const Data& data, const fs::path& dir, std::ostream& out) {
  fs::create_directories(dir);
  const Split sp = split(data.train.size(), {cfg.data.seed, cfg.data.split_fraction});
  const Dataset search_train = data.train.subset(sp.search_train);
  const Dataset search_val = data.train.subset(sp.search_val);
  SearchOutcome res;
  res.searcher = std::make_unique<Searcher>(cfg.search_config(), kCifarClasses, data.train.height, data.train.width);
  res.searcher->set_snapshot_dir(dir);
  std::ofstream csv(dir / "metrics.csv", std::ios::trunc);
  if (!csv) throw IoError("cannot write " + (dir / "metrics.csv").string());
  csv << metrics_csv_header();
  res.metrics = res.searcher->run(search_train, search_val, [&](const EpochMetrics& m) {
    csv << metrics_csv_row(m);
    csv.flush();
    out << "search epoch " << m.epoch << "  train_acc " << fmt("%.4f", m.train_acc) << "  val_acc "
        << fmt("%.4f", m.val_acc) << "  entropy " << fmt("%.4f", m.entropy) << "  learnable "
        << fmt("%.3f", m.learnable_frac) << "\n";
  });
  res.genotype = res.searcher->genotype();
  res.genotype.save(dir / "genotype.json");
  ArchParams& arch = res.searcher->arch();
  save_checkpoint(dir / "arch.ckpt",
                  {{"arch.normal", arch.logits(CellKind::Normal)}, {"arch.reduce", arch.logits(CellKind::Reduction)}});
  return res;
}

std::string train_metrics_json(const TrainResult& r) {
  std::string s = "{\n";
  s += "  \"epochs\": " + std::to_string(r.curve.size()) + ",\n";
  s += "  \"final_train_acc\": " + fmt("%.6f", r.final_train_acc()) + ",\n";
  s += "  \"final_test_acc\": " + fmt("%.6f", r.final_test_acc()) + ",\n";
  s += "  \"underfitting\": " + std::string(r.underfitting ? "true" : "false") + ",\n";
  s += "  \"spike_fraction\": " + fmt("%.6f", r.spike_fraction) + "\n}\n";
  return s;
}

TrainResult run_train(const RunConfig& cfg, const Genotype& genotype, const Data& data, const fs::path& dir,
                      std::ostream& out) {
  const NetworkConfig nc = cfg.train_network(kCifarClasses);
  auto net = build_network(genotype, nc, cfg.seed, data.train.height, data.train.width);
  TrainOptions opts;
  opts.seed = cfg.seed;
  opts.out_dir = dir;
  opts.log_grad_norms = cfg.train.log_grad_norms;
  opts.max_steps_per_epoch = cfg.train.max_steps_per_epoch;
  opts.eval_batch_size = cfg.train.eval_batch_size;
  fs::create_directories(dir);
  write_text(dir / "model.json", model_header(*net) + "\n");
  const TrainScheme scheme = cfg.train_scheme();
  // Progress per epoch comes from curve.csv; print a summary line here.
  TrainResult r = train(*net, scheme, data.train, data.test, opts);
  write_text(dir / "train_metrics.json", train_metrics_json(r));
  out << "trained " << r.curve.size() << " epochs  train_acc " << fmt("%.4f", r.final_train_acc()) << "  test_acc "
      << fmt("%.4f", r.final_test_acc()) << "  spike_fraction " << fmt("%.4f", r.spike_fraction) << "\n";
  return r;
}

bool is_deployed_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  char magic[8] = {};
  is.read(magic, 8);
  return is && std::string_view(magic, 8) == std::string_view(kDeployMagic, 8);
}

// Float network from a checkpoint and the model.json written beside it.
std::unique_ptr<Network> load_trained(const fs::path& ckpt) {
  auto net = network_from_header(read_text(ckpt.parent_path() / "model.json"));
  load_module_state(*net, load_checkpoint(ckpt));
  net->set_training(false);
  return net;
}

std::unique_ptr<Network> load_any(const fs::path& path, bool* packed) {
  if (is_deployed_file(path)) {
    *packed = true;
    return std::move(load_deployed(path).network);
  }
  *packed = false;
  return load_trained(path);
}

std::vector<int> predictions(Network& net, const Dataset& ds, int batch) {
  return predict(net, [&net](const Tensor& x) { return net.forward(x); }, ds, batch);
}

int cmd_search(const RunConfig& cfg, std::ostream& out) {
  write_snapshot(cfg, cfg.out, "search");
  const Data data = load_data(cfg);
  const SearchOutcome res = run_search(cfg, data, cfg.out, out);
  out << res.genotype.to_json();
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  write_snapshot(cfg, cfg.out, "train");
  const Genotype g = Genotype::load(cfg.genotype_path());
  run_train(cfg, g, load_data(cfg), cfg.out, out);
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  write_snapshot(cfg, cfg.out, "eval");
  bool packed = false;
  auto net = load_any(cfg.model_path(), &packed);
  const Data data = load_data(cfg);
  const auto pred = predictions(*net, data.test, cfg.train.eval_batch_size);
  const double acc = accuracy(pred, data.test.labels);
  std::string json = "{\n  \"model\": \"" + cfg.model_path().generic_string() + "\",\n";
  json += "  \"packed\": " + std::string(packed ? "true" : "false") + ",\n";
  json += "  \"samples\": " + std::to_string(data.test.size()) + ",\n";
  json += "  \"accuracy\": " + fmt("%.6f", acc) + "\n}\n";
  write_text(fs::path(cfg.out) / "eval.json", json);
  std::string listing;
  for (int p : pred) listing += std::to_string(p) + "\n";
  write_text(fs::path(cfg.out) / "predictions.txt", listing);
  out << "test accuracy " << fmt("%.4f", acc) << " on " << data.test.size() << " images"
      << (packed ? " (packed)" : "") << "\n";
  return kExitOk;
}

int cmd_export(const RunConfig& cfg, std::ostream& out) {
  write_snapshot(cfg, cfg.out, "export");
  auto net = load_trained(cfg.model_path());
  const fs::path target = fs::path(cfg.out) / "model.bnas";
  export_model(target, *net);
  const CostReport cost = cost_report(net->genotype(), net->config(), net->input_height(), net->input_width());
  write_text(fs::path(cfg.out) / "cost.txt", cost.to_text());
  write_text(fs::path(cfg.out) / "cost.json", cost.to_json());
  out << "wrote " << target.generic_string() << " (" << fs::file_size(target) << " bytes)\n" << cost.to_text();
  return kExitOk;
}

// Times every BinConv2d call by layer signature while delegating to `inner`
// (packed) or to the float sign path when `inner` is null.
class TimingBackend : public BinConvBackend {
 public:
  struct Row {
    int calls = 0;
    double seconds = 0.0;
  };
  TimingBackend(std::shared_ptr<const BinConvBackend> inner, std::map<std::string, Row>* rows)
      : inner_(std::move(inner)), rows_(rows) {}

  Tensor forward(const Tensor& a, const BinConv2d& layer) const override {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor y = inner_ ? inner_->forward(a, layer) : binconv_forward(a, layer.latent(), layer.geometry());
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const ConvGeometry& g = layer.geometry();
    char key[128];
    std::snprintf(key, sizeof key, "%4d->%-4d k%d s%d d%d g%-3d %3dx%-3d", layer.in_channels(), layer.out_channels(),
                  g.kernel, g.stride, g.dilation, g.groups, a.dim(2), a.dim(3));
    Row& r = (*rows_)[key];
    ++r.calls;
    r.seconds += dt;
    return y;
  }

 private:
  std::shared_ptr<const BinConvBackend> inner_;
  std::map<std::string, Row>* rows_;
};

// Wraps each layer's current backend (possibly none) in a TimingBackend.
void install_timers(Network& net, std::map<std::string, TimingBackend::Row>* rows) {
  net.for_each_module([rows](Module& m) {
    if (auto* conv = dynamic_cast<BinConv2d*>(&m)) {
      conv->set_backend(std::make_shared<TimingBackend>(conv->backend(), rows));
    }
  });
}

int cmd_bench(const RunConfig& cfg, std::ostream& out) {
  write_snapshot(cfg, cfg.out, "bench");
  const fs::path model = cfg.deploy.model.empty() ? fs::path(cfg.out) / "model.bnas" : fs::path(cfg.deploy.model);
  DeployedModel packed = load_deployed(model);
  DeployedModel reference = load_deployed(model);
  remove_packed_backend(*reference.network);
  Network& pnet = *packed.network;
  Network& fnet = *reference.network;

  const CostReport cost = cost_report(pnet.genotype(), pnet.config(), pnet.input_height(), pnet.input_width());
  std::string report = cost.to_text();

  const Data data = load_data(cfg);
  const auto pp = predictions(pnet, data.test, cfg.train.eval_batch_size);
  const auto fp = predictions(fnet, data.test, cfg.train.eval_batch_size);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < pp.size(); ++i) agree += pp[i] == fp[i];

  std::map<std::string, TimingBackend::Row> float_rows, packed_rows;
  install_timers(fnet, &float_rows);
  install_timers(pnet, &packed_rows);
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.deploy.bench_batch), data.test.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(cfg.seed);
  const Batch batch = make_batch(data.test, idx, AugmentSet::None, rng);
  double float_total = 0.0, packed_total = 0.0;
  {
    NoGradGuard ng;
    for (int r = 0; r < cfg.deploy.bench_repeats; ++r) {
      auto t0 = std::chrono::steady_clock::now();
      (void)fnet.forward(batch.images);
      float_total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      t0 = std::chrono::steady_clock::now();
      (void)pnet.forward(batch.images);
      packed_total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  }

  std::string table = "\nbinary conv timing, batch " + std::to_string(n) + ", " + std::to_string(cfg.deploy.bench_repeats) +
                      " passes (ms per call)\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-36s %6s %10s %10s %8s\n", "layer", "calls", "float", "packed", "ratio");
  table += line;
  for (const auto& [key, fr] : float_rows) {
    const auto it = packed_rows.find(key);
    if (it == packed_rows.end()) continue;
    const double f = 1e3 * fr.seconds / fr.calls, p = 1e3 * it->second.seconds / it->second.calls;
    std::snprintf(line, sizeof line, "%-36s %6d %10.3f %10.3f %7.2fx\n", key.c_str(), fr.calls, f, p, f / p);
    table += line;
  }
  const int reps = cfg.deploy.bench_repeats;
  std::snprintf(line, sizeof line, "%-36s %6d %10.3f %10.3f %7.2fx\n", "whole network", reps, 1e3 * float_total / reps,
                1e3 * packed_total / reps, float_total / packed_total);
  table += line;
  std::snprintf(line, sizeof line, "\nprediction agreement packed vs float sign path: %zu / %zu\n", agree, pp.size());
  table += line;

  write_text(fs::path(cfg.out) / "bench_cost.txt", report);
  write_text(fs::path(cfg.out) / "bench.txt", report + table);
  out << report << table;
  return agree == pp.size() ? kExitOk : 1;
}

struct Ablation {
  std::string name;
  std::string description;
};

const std::vector<Ablation>& ablations() {
  static const std::vector<Ablation> list = {
      {"no_skip", "inter-cell skip connections removed"},
      {"no_zeroise", "Zeroise excluded at derivation (gamma = inf)"},
      {"no_div", "diversity regularizer off (lambda = 0)"},
      {"no_dilconv", "dilated convolutions removed from the search space"},
      {"with_sepconv", "binary separable convolutions added to the search space"},
  };
  return list;
}

RunConfig ablated(const RunConfig& base, const std::string& which) {
  RunConfig c = base;
  auto conflict = [&which](bool already) {
    if (already) throw ConfigError("ablate " + which + ": the base configuration already has this mechanism toggled");
  };
  if (which == "no_skip") {
    conflict(!base.search.inter_cell_skip || !base.train.inter_cell_skip);
    c.search.inter_cell_skip = false;
    c.train.inter_cell_skip = false;
  } else if (which == "no_zeroise") {
    conflict(std::isinf(base.search.gamma));
    c.search.gamma = std::numeric_limits<double>::infinity();
  } else if (which == "no_div") {
    conflict(base.search.lambda == 0.0);
    c.search.lambda = 0.0;
  } else if (which == "no_dilconv") {
    conflict(base.search.space != "standard");
    c.search.space = "no_dilconv";
  } else if (which == "with_sepconv") {
    conflict(base.search.space != "standard");
    c.search.space = "with_sepconv";
  } else {
    throw ConfigError("unknown ablation '" + which + "'");
  }
  return c;
}

int cmd_ablate(const RunConfig& cfg, const std::string& which, std::ostream& out) {
  const RunConfig abl = ablated(cfg, which);
  abl.validate();
  const fs::path root = fs::path(cfg.out) / ("ablate_" + which);
  write_snapshot(cfg, root / "baseline", "search");
  write_snapshot(abl, root / "ablated", "search");
  const Data data = load_data(cfg);

  struct Row {
    std::string variant;
    Genotype genotype;
    double val_acc = 0.0;
    double learnable = 0.0;
    TrainResult trained;
  };
  std::vector<Row> rows;
  out << "== baseline search\n";
  SearchOutcome base = run_search(cfg, data, root / "baseline", out);
  rows.push_back({"baseline", base.genotype, base.metrics.back().val_acc,
                  selection_diversity_metric([&] {
                    std::vector<double> h;
                    for (const auto& m : base.metrics) h.push_back(m.learnable_frac);
                    return h;
                  }()),
                  {}});
  if (which == "no_zeroise") {
    // Same search; only the selection rule differs.
    Genotype g = derive_genotype(base.searcher->arch(), abl.search.gamma);
    g.seed = cfg.seed;
    fs::create_directories(root / "ablated");
    g.save(root / "ablated" / "genotype.json");
    rows.push_back({which, g, rows[0].val_acc, rows[0].learnable, {}});
  } else {
    out << "== " << which << " search\n";
    SearchOutcome a = run_search(abl, data, root / "ablated", out);
    std::vector<double> h;
    for (const auto& m : a.metrics) h.push_back(m.learnable_frac);
    rows.push_back({which, a.genotype, a.metrics.back().val_acc, selection_diversity_metric(h), {}});
  }
  const RunConfig* cfgs[2] = {&cfg, &abl};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << "== train " << rows[i].variant << "\n";
    rows[i].trained = run_train(*cfgs[i], rows[i].genotype, data, root / (i == 0 ? "baseline" : "ablated"), out);
  }

  std::string table = "| Variant | Search val acc | Learnable frac | Zeroise edges | Test acc (%) | Memory savings | FLOPs |\n";
  table += "|---|---|---|---|---|---|---|\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Row& r = rows[i];
    const NetworkConfig nc = cfgs[i]->train_network(kCifarClasses);
    const CostReport cost = cost_report(r.genotype, nc, data.train.height, data.train.width);
    table += "| " + r.variant + " | " + fmt("%.4f", r.val_acc) + " | " + fmt("%.3f", r.learnable) + " | " +
             std::to_string(r.genotype.count(LayerKind::Zeroise)) + " | " + fmt("%.2f", 100.0 * r.trained.final_test_acc()) +
             " | " + fmt("%.2fx", cost.memory_savings()) + " | " + fmt("%.4g", cost.flops()) + " |\n";
  }
  std::string desc;
  for (const auto& a : ablations()) {
    if (a.name == which) desc = a.description;
  }
  const std::string doc = "# Ablation: " + which + "\n\n" + desc + "\n\n" + table;
  write_text(root / "comparison.md", doc);
  out << doc;
  return kExitOk;
}

int cmd_plot(const std::vector<std::string>& inputs, const RunConfig& cfg, std::ostream& out) {
  if (inputs.empty()) throw ConfigError("plot: no input files");
  fs::create_directories(cfg.out);
  for (const auto& in : inputs) {
    const fs::path p(in);
    std::string svg;
    if (p.extension() == ".csv") {
      svg = csv_to_svg(read_text(p), p.filename().string());
    } else if (p.extension() == ".bin") {
      svg = grad_log_to_svg(GradLog::load(p), p.filename().string());
    } else {
      throw ConfigError("plot: unsupported input " + in + " (expected .csv or grads .bin)");
    }
    const fs::path target = fs::path(cfg.out) / (p.stem().string() + ".svg");
    write_text(target, svg);
    out << "wrote " << target.generic_string() << "\n";
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Binary architecture search, training and deployment", "bnas"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, preset_name, scheme_name, gamma_text, out_dir;
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "TOML-style configuration file");
  app.add_option("--seed", seed, "Run seed (overrides the config)");
  app.add_option("--preset", preset_name, "Network preset for train")
      ->check(CLI::IsMember({"bnas-mini", "bnas-a", "bnas-b", "bnas-c"}));
  app.add_option("--gamma", gamma_text, "Zeroise divisor at derivation (number or inf)");
  app.add_option("--scheme", scheme_name, "Training scheme")->check(CLI::IsMember({"standard", "minimal", "minimal-longer"}));
  app.add_option("--out", out_dir, "Output directory");

  std::string model_path, which;
  std::vector<std::string> plot_inputs;
  auto* search = app.add_subcommand("search", "Run the architecture search and write genotype.json");
  auto* train_cmd = app.add_subcommand("train", "Train a network from a genotype");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or deployed model on the test set");
  auto* bench = app.add_subcommand("bench", "Cost report and packed-vs-float timing of a deployed model");
  auto* exp = app.add_subcommand("export", "Write the packed BNASBIN1 model and its cost report");
  auto* ablate = app.add_subcommand("ablate", "Paired baseline/ablated search and training");
  auto* plot = app.add_subcommand("plot", "SVG figures from curve/metrics CSVs and gradient logs");
  for (auto* sub : {eval, bench, exp}) sub->add_option("--model", model_path, "Model file (checkpoint or .bnas)");
  ablate->add_option("which", which, "Mechanism to ablate")
      ->required()
      ->check(CLI::IsMember({"no_skip", "no_zeroise", "no_div", "no_dilconv", "with_sepconv"}));
  plot->add_option("inputs", plot_inputs, "curve.csv, metrics.csv or grads.bin files")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    if (app.count("--seed")) cfg.seed = seed;
    if (!preset_name.empty()) cfg.apply_preset(preset_name);
    if (!scheme_name.empty()) cfg.train.scheme = scheme_name;
    if (!out_dir.empty()) cfg.out = out_dir;
    if (!model_path.empty()) cfg.deploy.model = model_path;
    if (!gamma_text.empty()) {
      cfg.search.gamma = RunConfig::parse("[search]\ngamma = " +
                                          (gamma_text == "inf" ? std::string("\"inf\"") : gamma_text) + "\n", "--gamma")
                             .search.gamma;
    }
    cfg.validate();
    if (*search) return cmd_search(cfg, out);
    if (*train_cmd) return cmd_train(cfg, out);
    if (*eval) return cmd_eval(cfg, out);
    if (*bench) return cmd_bench(cfg, out);
    if (*exp) return cmd_export(cfg, out);
    if (*ablate) return cmd_ablate(cfg, which, out);
    if (*plot) return cmd_plot(plot_inputs, cfg, out);
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what();
    if (!e.snapshot.empty()) err << " (snapshot " << e.snapshot.generic_string() << ")";
    err << "\n";
    return kExitDivergence;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const GenotypeError& e) {
    err << "I/O error: bad genotype file: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace bnas::cli
