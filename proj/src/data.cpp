#include "bnas/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>
#include <string>

namespace bnas {

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.images.reserve(indices.size() * image_size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= size()) throw std::out_of_range("dataset index " + std::to_string(i) + " out of range");
    const auto img = image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

Dataset parse_cifar10(std::span<const std::uint8_t> bytes, std::string_view origin) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = bytes.size() / kCifarRecordBytes * kCifarRecordBytes;
    throw IoError(std::string(origin) + ": truncated record at byte offset " + std::to_string(offset) + " (" +
                  std::to_string(bytes.size() - offset) + " of " + std::to_string(kCifarRecordBytes) + " bytes)");
  }
  Dataset ds;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  ds.images.resize(n * ds.image_size());
  ds.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] >= kCifarClasses) {
      throw std::invalid_argument(std::string(origin) + ": label " + std::to_string(rec[0]) + " at byte offset " +
                                  std::to_string(r * kCifarRecordBytes) + " is not a CIFAR-10 class");
    }
    ds.labels[r] = rec[0];
    float* dst = ds.images.data() + r * ds.image_size();
    for (std::size_t k = 0; k < ds.image_size(); ++k) dst[k] = static_cast<float>(rec[1 + k]) / 255.0f;
  }
  return ds;
}

Dataset load_cifar10_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open CIFAR-10 file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_cifar10(bytes, path.string());
}

namespace {
void append(Dataset& into, const Dataset& from) {
  into.images.insert(into.images.end(), from.images.begin(), from.images.end());
  into.labels.insert(into.labels.end(), from.labels.begin(), from.labels.end());
}
}  // namespace

std::pair<Dataset, Dataset> load_cifar10_bin(const std::filesystem::path& dir) {
  Dataset train;
  for (int i = 1; i <= 5; ++i) append(train, load_cifar10_file(dir / ("data_batch_" + std::to_string(i) + ".bin")));
  Dataset test = load_cifar10_file(dir / "test_batch.bin");
  return {std::move(train), std::move(test)};
}

void write_cifar10_bin(const Dataset& ds, const std::filesystem::path& path) {
  if (ds.channels != 3 || ds.height != kCifarSide || ds.width != kCifarSide) {
    throw std::invalid_argument("CIFAR-10 layout needs 3x32x32 images");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  std::vector<char> rec(kCifarRecordBytes);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    rec[0] = static_cast<char>(ds.labels[r]);
    const auto img = ds.image(r);
    for (std::size_t k = 0; k < img.size(); ++k) {
      rec[1 + k] = static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(img[k], 0.0f, 1.0f) * 255.0f)));
    }
    os.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  if (!os) throw IoError("short write to " + path.string());
}

Dataset synthetic_blobs(int classes, std::size_t n, std::uint64_t seed, float noise, int side) {
  if (classes < 1) throw std::invalid_argument("synthetic_blobs: classes must be positive");
  Rng rng(seed);
  Dataset ds;
  ds.height = ds.width = side;
  const std::size_t plane = static_cast<std::size_t>(side) * side;
  // Each class: a base colour plus a smooth sinusoidal pattern with class-specific frequency and phase.
  struct Proto {
    std::array<float, 3> colour, amp;
    float fx, fy, phase;
  };
  std::vector<Proto> protos(static_cast<std::size_t>(classes));
  for (auto& p : protos) {
    for (int c = 0; c < 3; ++c) {
      p.colour[c] = rng.uniform(0.25f, 0.75f);
      p.amp[c] = rng.uniform(0.05f, 0.2f);
    }
    p.fx = static_cast<float>(rng.uniform_int(1, 3));
    p.fy = static_cast<float>(rng.uniform_int(1, 3));
    p.phase = rng.uniform(0.0f, 6.2831853f);
  }
  ds.images.resize(n * ds.image_size());
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    ds.labels[i] = label;
    const Proto& p = protos[static_cast<std::size_t>(label)];
    float* img = ds.images.data() + i * ds.image_size();
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
          const float u = 6.2831853f * static_cast<float>(x) / static_cast<float>(side);
          const float v = 6.2831853f * static_cast<float>(y) / static_cast<float>(side);
          const float mean = p.colour[c] + p.amp[c] * std::sin(p.fx * u + p.fy * v + p.phase);
          img[c * plane + static_cast<std::size_t>(y) * side + x] = std::clamp(mean + noise * rng.normal(), 0.0f, 1.0f);
        }
      }
    }
  }
  return ds;
}

Dataset downsample(const Dataset& ds, int factor) {
  if (factor < 1 || ds.height % factor != 0 || ds.width % factor != 0) {
    throw std::invalid_argument("downsample: factor must divide the image extents");
  }
  if (factor == 1) return ds;
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height / factor;
  out.width = ds.width / factor;
  out.labels = ds.labels;
  out.images.resize(ds.size() * out.image_size());
  const float inv = 1.0f / static_cast<float>(factor * factor);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const float* src = ds.images.data() + i * ds.image_size();
    float* dst = out.images.data() + i * out.image_size();
    for (int c = 0; c < ds.channels; ++c) {
      for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
          float s = 0.0f;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx)
              s += src[(static_cast<std::size_t>(c) * ds.height + y * factor + dy) * ds.width + x * factor + dx];
          dst[(static_cast<std::size_t>(c) * out.height + y) * out.width + x] = s * inv;
        }
      }
    }
  }
  return out;
}

Dataset stratified_subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n >= ds.size()) return ds;
  Rng rng(seed);
  int classes = 0;
  for (int l : ds.labels) classes = std::max(classes, l + 1);
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  for (auto& idx : by_class) std::shuffle(idx.begin(), idx.end(), rng.engine());
  // Round-robin over classes keeps proportions within one sample of exact.
  std::vector<std::size_t> picked;
  std::vector<std::size_t> cursor(by_class.size(), 0);
  while (picked.size() < n) {
    for (std::size_t c = 0; c < by_class.size() && picked.size() < n; ++c) {
      if (cursor[c] < by_class[c].size()) picked.push_back(by_class[c][cursor[c]++]);
    }
  }
  std::sort(picked.begin(), picked.end());
  return ds.subset(picked);
}

Split split(std::size_t full_train_size, const SplitSpec& spec) {
  if (spec.fraction <= 0.0 || spec.fraction >= 1.0) throw std::invalid_argument("split fraction must lie in (0, 1)");
  std::vector<std::size_t> idx(full_train_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(spec.seed);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  const auto cut = static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(full_train_size)));
  Split s;
  s.search_train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut));
  s.search_val.assign(idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end());
  std::sort(s.search_train.begin(), s.search_train.end());
  std::sort(s.search_val.begin(), s.search_val.end());
  return s;
}

std::string_view to_string(AugmentSet set) {
  switch (set) {
    case AugmentSet::None:
      return "none";
    case AugmentSet::FlipCrop:
      return "flip+crop";
    case AugmentSet::FlipCropJitter:
      return "flip+crop+jitter";
  }
  return "?";
}

AugmentSet augment_set_from_string(std::string_view name) {
  for (AugmentSet set : {AugmentSet::None, AugmentSet::FlipCrop, AugmentSet::FlipCropJitter}) {
    if (name == to_string(set)) return set;
  }
  throw std::invalid_argument("unknown augmentation set '" + std::string(name) + "'");
}

void horizontal_flip(std::span<float> chw, int channels, int height, int width) {
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < height; ++y) {
      float* row = chw.data() + (static_cast<std::size_t>(c) * height + y) * width;
      std::reverse(row, row + width);
    }
}

void reflect_pad_crop(std::span<float> chw, int channels, int height, int width, int pad, int top, int left) {
  if (top < 0 || left < 0 || top > 2 * pad || left > 2 * pad) throw std::invalid_argument("crop window outside padded image");
  auto reflect = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  std::vector<float> src(chw.begin(), chw.end());
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const int sy = reflect(y + top - pad, height), sx = reflect(x + left - pad, width);
        chw[(static_cast<std::size_t>(c) * height + y) * width + x] = src[(static_cast<std::size_t>(c) * height + sy) * width + sx];
      }
}

void color_jitter(std::span<float> chw, int channels, int height, int width, float brightness, float contrast,
                  float saturation) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (float& v : chw) v *= brightness;
  if (channels == 3) {
    double mean_gray = 0.0;
    std::vector<float> gray(plane);
    for (std::size_t k = 0; k < plane; ++k) {
      gray[k] = 0.299f * chw[k] + 0.587f * chw[plane + k] + 0.114f * chw[2 * plane + k];
      mean_gray += gray[k];
    }
    mean_gray /= static_cast<double>(plane);
    for (int c = 0; c < 3; ++c)
      for (std::size_t k = 0; k < plane; ++k) {
        float& v = chw[c * plane + k];
        v = static_cast<float>(mean_gray) + contrast * (v - static_cast<float>(mean_gray));
      }
    for (std::size_t k = 0; k < plane; ++k) {
      const float g = 0.299f * chw[k] + 0.587f * chw[plane + k] + 0.114f * chw[2 * plane + k];
      for (int c = 0; c < 3; ++c) chw[c * plane + k] = g + saturation * (chw[c * plane + k] - g);
    }
  }
  for (float& v : chw) v = std::clamp(v, 0.0f, 1.0f);
}

void augment_image(std::span<float> chw, int channels, int height, int width, AugmentSet set, Rng& rng) {
  if (set == AugmentSet::None) return;
  if (rng.bernoulli(0.5)) horizontal_flip(chw, channels, height, width);
  constexpr int pad = 4;
  const int top = rng.uniform_int(0, 2 * pad), left = rng.uniform_int(0, 2 * pad);
  reflect_pad_crop(chw, channels, height, width, pad, top, left);
  if (set == AugmentSet::FlipCropJitter) {
    const float b = rng.uniform(0.8f, 1.2f), c = rng.uniform(0.8f, 1.2f), s = rng.uniform(0.8f, 1.2f);
    color_jitter(chw, channels, height, width, b, c, s);
  }
}

Batch make_batch(const Dataset& ds, std::span<const std::size_t> indices, AugmentSet set, Rng& rng, bool normalize) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
  const std::size_t sz = ds.image_size();
  std::vector<float> buf(indices.size() * sz);
  Batch b;
  b.labels.reserve(indices.size());
  const std::size_t plane = static_cast<std::size_t>(ds.height) * ds.width;
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const auto img = ds.image(indices[j]);
    std::span<float> dst(buf.data() + j * sz, sz);
    std::copy(img.begin(), img.end(), dst.begin());
    augment_image(dst, ds.channels, ds.height, ds.width, set, rng);
    if (normalize && ds.channels == 3) {
      for (int c = 0; c < 3; ++c)
        for (std::size_t k = 0; k < plane; ++k) dst[c * plane + k] = (dst[c * plane + k] - kCifarMean[c]) / kCifarStd[c];
    }
    b.labels.push_back(ds.labels[indices[j]]);
  }
  b.images = Tensor::from({static_cast<int>(indices.size()), ds.channels, ds.height, ds.width}, std::move(buf));
  return b;
}

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, int batch_size, Rng& rng, bool drop_last) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(n, s + static_cast<std::size_t>(batch_size));
    if (drop_last && e - s < static_cast<std::size_t>(batch_size)) break;
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s), idx.begin() + static_cast<std::ptrdiff_t>(e));
  }
  return out;
}

}  // namespace bnas
