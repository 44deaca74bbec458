#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bnas/nn.hpp"

namespace bnas {

/// File-format or filesystem failure while reading/writing model artifacts.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Little-endian primitives shared by all binary artifacts.
namespace binio {
void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, float v);
void write_bytes(std::ostream& os, std::string_view bytes);
std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);
std::string read_bytes(std::istream& is, std::size_t n);
}  // namespace binio

inline constexpr char kCheckpointMagic[] = "BNASCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes "BNASCKPT", version, then one blob per tensor:
/// name length u32, utf-8 name, rank u32, extents u32[rank], f32 data.
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Parameters followed by buffers, the order used for module checkpoints.
std::vector<NamedTensor> module_state(const Module& m);
/// Copies tensors by name into the module; every module tensor must be present with a matching shape.
void load_module_state(Module& m, const std::vector<NamedTensor>& tensors);

}  // namespace bnas
