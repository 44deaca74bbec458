#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>

#include "bnas/network.hpp"
#include "bnas/search.hpp"
#include "bnas/trainer.hpp"

namespace bnas {

/// Malformed, unknown or conflicting configuration. The CLI maps it to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataSection {
  std::string cifar_dir;  // empty: synthetic blobs stand in for CIFAR-10
  std::uint64_t seed = 0;  // synthetic images, subsets and the search split; independent of the run seed
  int synthetic_train = 2000;
  int synthetic_test = 500;
  float synthetic_noise = 0.15f;
  int train_subset = 0;  // stratified subset of the training images, 0 = all
  int test_subset = 0;
  int downsample = 1;
  double split_fraction = 0.5;
};

struct TrainSection {
  std::string preset = "bnas-a";  // or "custom" to use the fields below
  int num_cells = 20;
  int init_channels = 36;
  bool stem_group_conv = false;
  bool inter_cell_skip = true;
  std::string scheme = "standard";
  int epochs = 600;
  int batch_size = 0;  // 0 keeps the scheme's batch size
  int max_steps_per_epoch = 0;
  bool log_grad_norms = false;
  int eval_batch_size = 256;
  std::string genotype;  // empty: <out>/genotype.json
};

struct DeploySection {
  std::string model;  // empty: <out>/model.ckpt
  int bench_batch = 16;
  int bench_repeats = 5;
};

/// Everything a subcommand needs, read from flat TOML-style text:
///   # comment
///   seed = 0
///   [search]
///   lambda = 1.0
/// Unknown sections and keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "runs/default";
  DataSection data;
  SearchConfig search;
  TrainSection train;
  DeploySection deploy;

  /// "section.key" names given explicitly in the parsed text.
  std::set<std::string> explicit_keys;

  static RunConfig parse(std::string_view text, std::string_view origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);
  /// Every key with its resolved value; parse(to_toml()) reproduces the config.
  std::string to_toml() const;

  /// Sets train.preset and copies the preset's network shape into the train section.
  void apply_preset(std::string_view name);
  /// Throws ConfigError on out-of-range values or when explicit network keys contradict the preset.
  void validate() const;

  SearchConfig search_config() const;
  NetworkConfig train_network(int num_classes) const;
  TrainScheme train_scheme() const;
  std::filesystem::path genotype_path() const;
  std::filesystem::path model_path() const;
};

}  // namespace bnas
