#include "bnas/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace bnas {

namespace binio {

namespace {
template <class T>
void put_le(std::ostream& os, T v) {
  char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
  os.write(buf, sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw IoError("unexpected end of file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}
}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { put_le(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
void write_f32(std::ostream& os, float v) { put_le(os, std::bit_cast<std::uint32_t>(v)); }
void write_bytes(std::ostream& os, std::string_view bytes) { os.write(bytes.data(), static_cast<std::streamsize>(bytes.size())); }
std::uint8_t read_u8(std::istream& is) { return get_le<std::uint8_t>(is); }
std::uint32_t read_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get_le<std::uint64_t>(is); }
float read_f32(std::istream& is) { return std::bit_cast<float>(get_le<std::uint32_t>(is)); }

std::string read_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("unexpected end of file");
  return s;
}

}  // namespace binio

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  binio::write_bytes(os, std::string_view(kCheckpointMagic, 8));
  binio::write_u32(os, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    binio::write_u32(os, static_cast<std::uint32_t>(name.size()));
    binio::write_bytes(os, name);
    binio::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int e : t.shape()) binio::write_u32(os, static_cast<std::uint32_t>(e));
    for (float v : t.data()) binio::write_f32(os, v);
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  if (binio::read_bytes(is, 8) != std::string_view(kCheckpointMagic, 8)) throw IoError("bad checkpoint magic: " + path.string());
  const auto version = binio::read_u32(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  std::vector<NamedTensor> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto name_len = binio::read_u32(is);
    std::string name = binio::read_bytes(is, name_len);
    const auto rank = binio::read_u32(is);
    if (rank > 8) throw IoError("implausible tensor rank in checkpoint for " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(binio::read_u32(is)));
    std::vector<float> data(shape_numel(shape));
    for (float& v : data) v = binio::read_f32(is);
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  return out;
}

std::vector<NamedTensor> module_state(const Module& m) {
  auto out = m.named_parameters();
  for (auto& b : m.named_buffers()) out.push_back(std::move(b));
  return out;
}

void load_module_state(Module& m, const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  for (auto& [name, dst] : module_state(m)) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
    const Tensor& src = *it->second;
    if (src.shape() != dst.shape()) {
      throw IoError("shape mismatch for '" + name + "': " + shape_str(src.shape()) + " vs " + shape_str(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  }
}

}  // namespace bnas
