#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "bnas/checkpoint.hpp"
#include "bnas/nn.hpp"

namespace bnas {

inline constexpr int kCifarClasses = 10;
inline constexpr int kCifarSide = 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * kCifarSide * kCifarSide;

/// Per-channel normalisation applied when batches are assembled.
inline constexpr std::array<float, 3> kCifarMean{0.4914f, 0.4822f, 0.4465f};
inline constexpr std::array<float, 3> kCifarStd{0.2470f, 0.2435f, 0.2616f};

/// Images stored as CHW floats in [0, 1], one after another.
struct Dataset {
  int channels = 3;
  int height = kCifarSide;
  int width = kCifarSide;
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return static_cast<std::size_t>(channels) * height * width; }
  std::span<const float> image(std::size_t i) const { return {images.data() + i * image_size(), image_size()}; }
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Parses one CIFAR-10 binary batch file (3073-byte records: label, then R, G, B planes).
/// Throws IoError for a missing file or truncated record and std::invalid_argument for a label >= 10.
Dataset load_cifar10_file(const std::filesystem::path& path);
/// Same for an in-memory buffer; `origin` names the source in error messages.
Dataset parse_cifar10(std::span<const std::uint8_t> bytes, std::string_view origin);
/// data_batch_1..5.bin and test_batch.bin from `dir`.
std::pair<Dataset, Dataset> load_cifar10_bin(const std::filesystem::path& dir);
/// Writes the dataset in the CIFAR-10 record layout (pixels rounded to bytes).
void write_cifar10_bin(const Dataset& ds, const std::filesystem::path& path);

/// Gaussian noise around a per-class colour pattern, clipped to [0, 1]. Higher
/// `noise` lowers the signal-to-noise ratio. Deterministic per seed.
Dataset synthetic_blobs(int classes, std::size_t n, std::uint64_t seed, float noise = 0.15f, int side = kCifarSide);

/// Box-filter downsampling by an integer factor (32 -> 16 with factor 2).
Dataset downsample(const Dataset& ds, int factor);

/// n records drawn per class in seeded order (classes kept in proportion), returned in index order.
Dataset stratified_subset(const Dataset& ds, std::size_t n, std::uint64_t seed);

/// Seeded split of full_train into disjoint search_train / search_val index sets.
struct SplitSpec {
  std::uint64_t seed = 0;
  double fraction = 0.5;  // share of full_train assigned to search_train
};
struct Split {
  std::vector<std::size_t> search_train;
  std::vector<std::size_t> search_val;
};
Split split(std::size_t full_train_size, const SplitSpec& spec);

enum class AugmentSet { None, FlipCrop, FlipCropJitter };
std::string_view to_string(AugmentSet set);
/// Inverse of to_string; throws std::invalid_argument for unknown names.
AugmentSet augment_set_from_string(std::string_view name);

/// In-place augmentation of one CHW image: coin-flip mirror, pad-4 reflect crop, optional jitter in U(0.8, 1.2).
void augment_image(std::span<float> chw, int channels, int height, int width, AugmentSet set, Rng& rng);
void horizontal_flip(std::span<float> chw, int channels, int height, int width);
/// Pad by `pad` with reflection and crop an h x w window at (top, left) of the padded image.
void reflect_pad_crop(std::span<float> chw, int channels, int height, int width, int pad, int top, int left);
/// Scales brightness, contrast and saturation by the given factors, then clips to [0, 1].
void color_jitter(std::span<float> chw, int channels, int height, int width, float brightness, float contrast,
                  float saturation);

/// Images [N, C, H, W] (augmented, then normalised) and their labels.
struct Batch {
  Tensor images;
  std::vector<int> labels;
};
Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices, AugmentSet set, Rng& rng, bool normalize = true);

/// Visits the dataset in seeded-shuffled batches of at most batch_size.
std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, int batch_size, Rng& rng, bool drop_last = false);

}  // namespace bnas
