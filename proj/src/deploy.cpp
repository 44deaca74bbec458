#include "bnas/deploy.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_set>

#include "bnas/checkpoint.hpp"
#include "json.hpp"

namespace bnas {

// ---------------------------------------------------------------- packing

PackedTensor pack(const Tensor& x) {
  if (!x.defined() || x.rank() < 1) throw ShapeError("pack: undefined tensor");
  PackedTensor p;
  p.shape = x.shape();
  p.bits = x.dim(-1);
  p.rows = static_cast<int>(x.numel() / static_cast<std::size_t>(p.bits));
  p.words_per_row = words_for_bits(p.bits);
  p.words.assign(static_cast<std::size_t>(p.rows) * p.words_per_row, 0);
  const auto d = x.data();
  for (int r = 0; r < p.rows; ++r) {
    std::uint64_t* row = p.words.data() + static_cast<std::size_t>(r) * p.words_per_row;
    for (int i = 0; i < p.bits; ++i) {
      if (d[static_cast<std::size_t>(r) * p.bits + i] >= 0.0f) row[i / 64] |= std::uint64_t{1} << (i % 64);
    }
  }
  return p;
}

Tensor unpack(const PackedTensor& p) {
  std::vector<float> out(static_cast<std::size_t>(p.rows) * p.bits);
  for (int r = 0; r < p.rows; ++r) {
    const auto row = p.row(r);
    for (int i = 0; i < p.bits; ++i) {
      out[static_cast<std::size_t>(r) * p.bits + i] = (row[i / 64] >> (i % 64)) & 1U ? 1.0f : -1.0f;
    }
  }
  return Tensor::from(p.shape, std::move(out));
}

namespace {

const std::array<std::uint8_t, 256>& byte_popcounts() {
  static const std::array<std::uint8_t, 256> table = [] {
    std::array<std::uint8_t, 256> t{};
    for (int i = 0; i < 256; ++i) t[i] = static_cast<std::uint8_t>((i & 1) + t[i / 2]);
    return t;
  }();
  return table;
}

}  // namespace

int popcount64(std::uint64_t v, PopcountImpl impl) {
  if (impl == PopcountImpl::Native) return std::popcount(v);
  const auto& t = byte_popcounts();
  int n = 0;
  for (int b = 0; b < 8; ++b) n += t[(v >> (8 * b)) & 0xFF];
  return n;
}

long xnor_dot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b, int bits, PopcountImpl impl) {
  if (a.size() != b.size()) throw ShapeError("xnor_dot: word count mismatch");
  long diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += popcount64(a[i] ^ b[i], impl);
  return static_cast<long>(bits) - 2 * diff;
}

long xnor_dot(const PackedTensor& a, const PackedTensor& b, PopcountImpl impl) {
  if (a.rows != 1 || b.rows != 1) throw ShapeError("xnor_dot: expected single packed vectors");
  if (a.bits != b.bits) {
    throw ShapeError("xnor_dot: length mismatch (" + std::to_string(a.bits) + " vs " + std::to_string(b.bits) + ")");
  }
  return xnor_dot(a.row(0), b.row(0), a.bits, impl);
}

// ---------------------------------------------------------------- packed convolution
//
// Filters and input windows are laid out tap-major: for each (ky, kx) a block
// of ceil(cin_g / 64) words holding the group's channel signs. A padded tap
// then drops out as a whole block instead of needing a per-bit mask.

namespace {

struct Layout {
  int cin_g, taps, channel_words;
  int words() const { return taps * channel_words; }
};

Layout layout_of(int in_channels, const ConvGeometry& geo) {
  const int cin_g = in_channels / geo.groups;
  return {cin_g, geo.kernel * geo.kernel, words_for_bits(cin_g)};
}

PackedConvWeights pack_signs(const Shape& shape, std::span<const float> signs, std::vector<float> beta,
                             const ConvGeometry& geo) {
  if (shape.size() != 4 || shape[2] != geo.kernel || shape[3] != geo.kernel) {
    throw ShapeError("packed weights: shape " + shape_str(shape) + " does not match the geometry");
  }
  PackedConvWeights w;
  w.geometry = geo;
  w.out_channels = shape[0];
  w.in_channels = shape[1] * geo.groups;
  const Layout lay = layout_of(w.in_channels, geo);
  w.signs.shape = shape;
  w.signs.rows = w.out_channels;
  w.signs.bits = lay.cin_g * lay.taps;
  w.signs.words_per_row = lay.words();
  w.signs.words.assign(static_cast<std::size_t>(w.out_channels) * lay.words(), 0);
  for (int o = 0; o < w.out_channels; ++o) {
    std::uint64_t* row = w.signs.words.data() + static_cast<std::size_t>(o) * lay.words();
    for (int c = 0; c < lay.cin_g; ++c)
      for (int t = 0; t < lay.taps; ++t) {
        const float s = signs[(static_cast<std::size_t>(o) * lay.cin_g + c) * lay.taps + t];
        if (s >= 0.0f) row[t * lay.channel_words + c / 64] |= std::uint64_t{1} << (c % 64);
      }
  }
  w.beta = std::move(beta);
  return w;
}

}  // namespace

PackedConvWeights PackedConvWeights::from_latent(const Tensor& latent, const ConvGeometry& geometry) {
  return pack_signs(latent.shape(), latent.data(), compute_beta(latent), geometry);
}

PackedConvWeights PackedConvWeights::from_params(const BinConvParams& params, const ConvGeometry& geometry) {
  return pack_signs(params.shape, params.signs, params.beta, geometry);
}

std::vector<std::int32_t> packed_correlation(const Tensor& activations, const PackedConvWeights& weights,
                                             PopcountImpl impl) {
  if (!activations.defined() || activations.rank() != 4 || activations.dim(1) != weights.in_channels) {
    throw ShapeError("packed_binconv: activations " + (activations.defined() ? shape_str(activations.shape()) : "<undef>") +
                     " do not match " + std::to_string(weights.in_channels) + " input channels");
  }
  const ConvGeometry& geo = weights.geometry;
  const int n = activations.dim(0), c = activations.dim(1), h = activations.dim(2), w = activations.dim(3);
  const int ho = ops::conv_out_extent(h, geo.kernel, geo.stride, geo.padding, geo.dilation);
  const int wo = ops::conv_out_extent(w, geo.kernel, geo.stride, geo.padding, geo.dilation);
  const Layout lay = layout_of(c, geo);
  const int out_g = weights.out_channels / geo.groups;
  const int cw = lay.channel_words;
  std::vector<std::int32_t> out(static_cast<std::size_t>(n) * weights.out_channels * ho * wo);
  std::vector<std::uint64_t> plane(static_cast<std::size_t>(h) * w * cw);
  std::vector<std::uint64_t> window(static_cast<std::size_t>(lay.words()));
  std::vector<int> valid_taps(static_cast<std::size_t>(lay.taps));
  const float* a = activations.data().data();
  const std::size_t hw = static_cast<std::size_t>(h) * w;

  for (int s = 0; s < n; ++s) {
    for (int g = 0; g < geo.groups; ++g) {
      // Channel signs of this group packed per pixel.
      std::fill(plane.begin(), plane.end(), 0);
      for (int cl = 0; cl < lay.cin_g; ++cl) {
        const float* src = a + (static_cast<std::size_t>(s) * c + g * lay.cin_g + cl) * hw;
        const std::uint64_t bit = std::uint64_t{1} << (cl % 64);
        for (std::size_t px = 0; px < hw; ++px) {
          if (src[px] >= 0.0f) plane[px * cw + cl / 64] |= bit;
        }
      }
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          int nvalid = 0;
          for (int ky = 0; ky < geo.kernel; ++ky) {
            const int iy = oy * geo.stride - geo.padding + ky * geo.dilation;
            for (int kx = 0; kx < geo.kernel; ++kx) {
              const int ix = ox * geo.stride - geo.padding + kx * geo.dilation;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              const int t = ky * geo.kernel + kx;
              valid_taps[static_cast<std::size_t>(nvalid++)] = t;
              std::copy_n(plane.data() + (static_cast<std::size_t>(iy) * w + ix) * cw, cw, window.data() + t * cw);
            }
          }
          for (int ol = 0; ol < out_g; ++ol) {
            const int o = g * out_g + ol;
            const std::uint64_t* wr = weights.signs.words.data() + static_cast<std::size_t>(o) * lay.words();
            long diff = 0;
            if (impl == PopcountImpl::Native) {
              for (int vt = 0; vt < nvalid; ++vt) {
                const int base = valid_taps[static_cast<std::size_t>(vt)] * cw;
                for (int j = 0; j < cw; ++j) diff += std::popcount(window[base + j] ^ wr[base + j]);
              }
            } else {
              for (int vt = 0; vt < nvalid; ++vt) {
                const int base = valid_taps[static_cast<std::size_t>(vt)] * cw;
                for (int j = 0; j < cw; ++j) diff += popcount64(window[base + j] ^ wr[base + j], impl);
              }
            }
            out[((static_cast<std::size_t>(s) * weights.out_channels + o) * ho + oy) * wo + ox] =
                static_cast<std::int32_t>(static_cast<long>(nvalid) * lay.cin_g - 2 * diff);
          }
        }
      }
    }
  }
  return out;
}

Tensor packed_binconv(const Tensor& activations, const PackedConvWeights& weights, PopcountImpl impl) {
  const auto corr = packed_correlation(activations, weights, impl);
  const ConvGeometry& geo = weights.geometry;
  const Tensor k = compute_K(activations, geo);
  const int n = activations.dim(0), out_c = weights.out_channels;
  const int ho = k.dim(2), wo = k.dim(3);
  const int per = out_c / geo.groups;
  const std::size_t hw = static_cast<std::size_t>(ho) * wo;
  std::vector<float> y(corr.size());
  const float* kd = k.data().data();
  // Same multiplication order as the float path: (correlation * beta) * K.
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < out_c; ++o) {
      const std::size_t off = (static_cast<std::size_t>(s) * out_c + o) * hw;
      const float* km = kd + (static_cast<std::size_t>(s) * geo.groups + o / per) * hw;
      const float b = weights.beta[static_cast<std::size_t>(o)];
      for (std::size_t p = 0; p < hw; ++p) {
        const float scaled = static_cast<float>(corr[off + p]) * b;
        y[off + p] = scaled * km[p];
      }
    }
  return Tensor::from({n, out_c, ho, wo}, std::move(y));
}

Tensor PackedBackend::forward(const Tensor& activations, const BinConv2d& layer) const {
  if (layer.out_channels() != weights_.out_channels || layer.in_channels() != weights_.in_channels) {
    throw ShapeError("PackedBackend: layer does not match its packed weights");
  }
  return packed_binconv(activations, weights_);
}

int install_packed_backend(Module& root) {
  int count = 0;
  root.for_each_module([&count](Module& m) {
    if (auto* conv = dynamic_cast<BinConv2d*>(&m)) {
      conv->set_backend(std::make_shared<PackedBackend>(PackedConvWeights::from_latent(conv->latent(), conv->geometry())));
      ++count;
    }
  });
  return count;
}

void remove_packed_backend(Module& root) {
  root.for_each_module([](Module& m) {
    if (auto* conv = dynamic_cast<BinConv2d*>(&m)) conv->set_backend(nullptr);
  });
}

// ---------------------------------------------------------------- cost accounting

double CostReport::memory_savings() const {
  const double stored = static_cast<double>(total.param_bits + total.norm_param_bits + total.float_param_bits);
  return stored > 0.0 ? static_cast<double>(total.fp_param_bits) / stored : 0.0;
}

double CostReport::speedup() const {
  const double f = flops();
  return f > 0.0 ? static_cast<double>(total.fp_ops) / f : 0.0;
}

std::string CostReport::to_text() const {
  char buf[1024];
  std::snprintf(buf, sizeof buf,
                "binary_ops          %20llu\n"
                "float_ops           %20llu\n"
                "flops               %20.1f\n"
                "param_bits_binary   %20llu\n"
                "param_bits_float    %20llu\n"
                "fp_reference_ops    %20llu\n"
                "fp_reference_bits   %20llu\n"
                "memory_savings      %19.2fx\n"
                "speedup             %19.2fx\n",
                static_cast<unsigned long long>(total.binary_ops), static_cast<unsigned long long>(total.float_ops), flops(),
                static_cast<unsigned long long>(param_bits_binary()), static_cast<unsigned long long>(param_bits_float()),
                static_cast<unsigned long long>(total.fp_ops), static_cast<unsigned long long>(total.fp_param_bits),
                memory_savings(), speedup());
  return buf;
}

std::string CostReport::to_json() const {
  nlohmann::ordered_json j;
  j["binary_ops"] = total.binary_ops;
  j["float_ops"] = total.float_ops;
  j["flops"] = flops();
  j["param_bits_binary"] = param_bits_binary();
  j["param_bits_float"] = param_bits_float();
  j["fp_reference_ops"] = total.fp_ops;
  j["fp_reference_param_bits"] = total.fp_param_bits;
  j["memory_savings"] = memory_savings();
  j["speedup"] = speedup();
  return j.dump(2) + "\n";
}

namespace {

constexpr std::uint64_t kFloatBits = 32;

OpCost pool_cost(int channels, int out_h, int out_w) {
  OpCost c;
  c.float_ops = 9ULL * static_cast<std::uint64_t>(channels) * out_h * out_w;
  c.fp_ops = c.float_ops;
  return c;
}

// Float-only layers cost the same in the binary model and in the reference.
OpCost classifier_cost(int features, int classes, int h, int w) {
  OpCost c;
  c.float_ops = static_cast<std::uint64_t>(features) * h * w + static_cast<std::uint64_t>(features) * classes;
  c.float_param_bits = kFloatBits * (static_cast<std::uint64_t>(features) * classes + classes);
  c.fp_ops = c.float_ops;
  c.fp_param_bits = c.float_param_bits;
  return c;
}

// Binary op cost, with the float reference taken from `reference` instead.
OpCost with_reference(OpCost binary, const OpCost& reference) {
  binary.fp_ops = reference.fp_ops;
  binary.fp_param_bits = reference.fp_param_bits;
  return binary;
}

}  // namespace

OpCost binary_pointwise_cost(int in_ch, int out_ch, int h, int w) {
  OpCost c = batchnorm_cost(in_ch, h, w);
  const std::uint64_t weights = static_cast<std::uint64_t>(in_ch) * out_ch;
  const std::uint64_t px = static_cast<std::uint64_t>(h) * w;
  c.binary_ops = weights * px;
  c.float_ops += static_cast<std::uint64_t>(in_ch) * px + px + 2 * static_cast<std::uint64_t>(out_ch) * px;
  c.param_bits = weights + kFloatBits * static_cast<std::uint64_t>(out_ch);
  c.fp_ops += weights * px;
  c.fp_param_bits += kFloatBits * weights;
  return c;
}

Genotype replace_zeroise(const Genotype& genotype, LayerKind kind) {
  Genotype g = genotype;
  for (auto* cell : {&g.normal, &g.reduce})
    for (auto& e : *cell)
      if (e.op == LayerKind::Zeroise) e.op = kind;
  return g;
}

CostReport cost_report(const Genotype& genotype, const NetworkConfig& cfg, int in_h, int in_w) {
  genotype.validate();
  const auto plans = plan_cells(cfg, in_h, in_w);
  OpCost total;
  const int stem_out = stem_channels(cfg);
  total += float_conv_cost(3, stem_out, 3, in_h, in_w, cfg.stem_group_conv ? kStemGroups : 1);
  total += batchnorm_cost(stem_out, in_h, in_w);
  int out_h = in_h, out_w = in_w;
  for (const CellPlan& p : plans) {
    const int c = p.channels;
    if (p.reduction_prev) {
      total += float_conv_cost(p.prev_prev_channels, c / 2, 1, p.in_h, p.in_w) +
               float_conv_cost(p.prev_prev_channels, c / 2, 1, p.in_h, p.in_w) + batchnorm_cost(c, p.in_h, p.in_w);
    } else {
      total += binary_pointwise_cost(p.prev_prev_channels, c, p.in_h, p.in_w);
    }
    total += binary_pointwise_cost(p.prev_channels, c, p.in_h, p.in_w);
    const CellKind kind = p.reduction ? CellKind::Reduction : CellKind::Normal;
    out_h = p.reduction ? p.in_h / 2 : p.in_h;
    out_w = p.reduction ? p.in_w / 2 : p.in_w;
    for (const GenotypeEdge& e : genotype.cell(kind)) {
      const int stride = edge_stride(kind, e.source);
      const int oh = block_out_extent(p.in_h, stride), ow = block_out_extent(p.in_w, stride);
      const OpCost binary = op_cost(e.op, c, c, oh, ow, stride);
      if (e.op == LayerKind::Zeroise) {
        // No float counterpart: the reference uses a 3x3 conv on this edge.
        total += with_reference(binary, op_cost(LayerKind::BinConv3, c, c, oh, ow, stride));
      } else {
        total += binary;
      }
    }
    if (cfg.inter_cell_skip) {
      const int body = kIntermediateNodes * c;
      if (p.reduction) total += pool_cost(p.prev_channels, out_h, out_w);
      if (p.reduction || p.prev_channels != body) total += float_conv_cost(p.prev_channels, body, 1, out_h, out_w);
    }
  }
  total += classifier_cost(kIntermediateNodes * plans.back().channels, cfg.num_classes, out_h, out_w);
  return CostReport{total};
}

CostReport layer_stack_cost(LayerKind kind, int blocks, int channels, int num_classes, int h, int w) {
  OpCost total = float_conv_cost(3, channels, 3, h, w) + batchnorm_cost(channels, h, w);
  for (int i = 0; i < blocks; ++i) total += op_cost(kind, channels, channels, h, w, 1);
  total += classifier_cost(channels, num_classes, h, w);
  return CostReport{total};
}

// ---------------------------------------------------------------- deployed model file

namespace {

std::unordered_set<const TensorImpl*> binary_weights(Module& root, std::map<const TensorImpl*, BinConv2d*>* owners = nullptr) {
  std::unordered_set<const TensorImpl*> out;
  root.for_each_module([&](Module& m) {
    if (auto* conv = dynamic_cast<BinConv2d*>(&m)) {
      out.insert(conv->latent().impl());
      if (owners) (*owners)[conv->latent().impl()] = conv;
    }
  });
  return out;
}

nlohmann::ordered_json network_json(const NetworkConfig& cfg) {
  nlohmann::ordered_json j;
  j["name"] = cfg.name;
  j["num_cells"] = cfg.num_cells;
  j["init_channels"] = cfg.init_channels;
  j["stem_group_conv"] = cfg.stem_group_conv;
  j["num_classes"] = cfg.num_classes;
  j["inter_cell_skip"] = cfg.inter_cell_skip;
  j["stem_multiplier"] = cfg.stem_multiplier;
  return j;
}

NetworkConfig network_from_json(const nlohmann::json& j, double gamma) {
  NetworkConfig cfg;
  cfg.name = j.at("name").get<std::string>();
  cfg.num_cells = j.at("num_cells").get<int>();
  cfg.init_channels = j.at("init_channels").get<int>();
  cfg.stem_group_conv = j.at("stem_group_conv").get<bool>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.inter_cell_skip = j.at("inter_cell_skip").get<bool>();
  cfg.stem_multiplier = j.at("stem_multiplier").get<int>();
  cfg.gamma = gamma;
  return cfg;
}

void write_shape(std::ostream& os, const Shape& s) {
  binio::write_u32(os, static_cast<std::uint32_t>(s.size()));
  for (int e : s) binio::write_u32(os, static_cast<std::uint32_t>(e));
}

Shape read_shape(std::istream& is) {
  const std::uint32_t rank = binio::read_u32(is);
  if (rank > 8) throw IoError("deployed model: implausible tensor rank " + std::to_string(rank));
  Shape s(rank);
  for (auto& e : s) e = static_cast<int>(binio::read_u32(is));
  return s;
}

}  // namespace

std::string model_header(const Network& net) {
  nlohmann::ordered_json header;
  header["genotype"] = nlohmann::ordered_json::parse(net.genotype().to_json());
  header["network"] = network_json(net.config());
  header["input"] = {net.input_height(), net.input_width()};
  return header.dump();
}

std::unique_ptr<Network> network_from_header(std::string_view json) {
  try {
    const auto header = nlohmann::json::parse(json);
    const Genotype g = Genotype::from_json(header.at("genotype").dump());
    const NetworkConfig cfg = network_from_json(header.at("network"), g.gamma);
    const auto input = header.at("input");
    Rng rng(0);
    return std::make_unique<Network>(g, cfg, rng, input.at(0).get<int>(), input.at(1).get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed model header: ") + e.what());
  } catch (const GenotypeError& e) {
    throw IoError(std::string("malformed genotype: ") + e.what());
  }
}

void export_model(const std::filesystem::path& path, Network& net) {
  const auto packed = binary_weights(net);
  const std::string blob = model_header(net);

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write deployed model " + path.string());
  binio::write_bytes(os, std::string_view(kDeployMagic, 8));
  binio::write_u32(os, kDeployVersion);
  binio::write_u32(os, static_cast<std::uint32_t>(blob.size()));
  binio::write_bytes(os, blob);
  auto tensors = net.named_parameters();
  for (auto& b : net.named_buffers()) tensors.push_back(b);
  binio::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    binio::write_u32(os, static_cast<std::uint32_t>(name.size()));
    binio::write_bytes(os, name);
    const bool is_packed = packed.count(t.impl()) != 0;
    binio::write_u8(os, is_packed ? 1 : 0);
    write_shape(os, t.shape());
    if (!is_packed) {
      for (float v : t.data()) binio::write_f32(os, v);
      continue;
    }
    // One packed row per output filter.
    const BinConvParams params = BinConvParams::from_latent(t);
    const int out_ch = t.dim(0);
    const PackedTensor bits = pack(Tensor::from({out_ch, static_cast<int>(t.numel()) / out_ch}, params.signs));
    binio::write_u32(os, static_cast<std::uint32_t>(bits.words_per_row));
    for (std::uint64_t word : bits.words) binio::write_u64(os, word);
    for (float b : params.beta) binio::write_f32(os, b);
  }
  if (!os) throw IoError("short write to " + path.string());
}

DeployedModel load_deployed(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open deployed model " + path.string());
  if (binio::read_bytes(is, 8) != std::string_view(kDeployMagic, 8)) throw IoError(path.string() + ": not a BNASBIN1 model");
  if (binio::read_u32(is) != kDeployVersion) throw IoError(path.string() + ": unsupported model version");
  DeployedModel out;
  out.json = binio::read_bytes(is, binio::read_u32(is));
  try {
    out.network = network_from_header(out.json);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }

  std::map<std::string, Tensor> slots;
  for (auto& [name, t] : out.network->named_parameters()) slots[name] = t;
  for (auto& [name, t] : out.network->named_buffers()) slots[name] = t;
  const auto packed = binary_weights(*out.network);

  const std::uint32_t count = binio::read_u32(is);
  if (count != slots.size()) throw IoError(path.string() + ": tensor count does not match the network");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = binio::read_bytes(is, binio::read_u32(is));
    const bool is_packed = binio::read_u8(is) != 0;
    const Shape shape = read_shape(is);
    auto it = slots.find(name);
    if (it == slots.end()) throw IoError(path.string() + ": unexpected tensor '" + name + "'");
    Tensor& t = it->second;
    if (t.shape() != shape) throw IoError(path.string() + ": shape mismatch for '" + name + "'");
    if (is_packed != (packed.count(t.impl()) != 0)) throw IoError(path.string() + ": encoding mismatch for '" + name + "'");
    if (!is_packed) {
      for (float& v : t.data()) v = binio::read_f32(is);
      continue;
    }
    PackedTensor bits;
    bits.rows = shape[0];
    bits.bits = static_cast<int>(shape_numel(shape)) / bits.rows;
    bits.shape = {bits.rows, bits.bits};
    bits.words_per_row = static_cast<int>(binio::read_u32(is));
    if (bits.words_per_row != words_for_bits(bits.bits)) throw IoError(path.string() + ": bad packing for '" + name + "'");
    bits.words.resize(static_cast<std::size_t>(bits.rows) * bits.words_per_row);
    for (auto& w : bits.words) w = binio::read_u64(is);
    const Tensor signs = unpack(bits);
    const int out_ch = bits.rows;
    const std::size_t per = t.numel() / static_cast<std::size_t>(out_ch);
    // Latent = sign * beta reproduces both the signs and beta exactly.
    for (int o = 0; o < out_ch; ++o) {
      const float b = binio::read_f32(is);
      for (std::size_t k = 0; k < per; ++k) t.data()[o * per + k] = signs.data()[o * per + k] * b;
    }
  }
  out.network->set_training(false);
  install_packed_backend(*out.network);
  return out;
}

}  // namespace bnas
