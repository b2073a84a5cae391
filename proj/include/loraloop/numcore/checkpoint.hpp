#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "loraloop/numcore/param_store.hpp"
#include "loraloop/numcore/tensor.hpp"

namespace loraloop::num {

/// Checkpoint layout (all integers little-endian):
///
///   magic   "LLCP" (4 bytes)
///   version u32 (currently 1)
///   count   u32
///   count times:
///     name length u16, name bytes (UTF-8)
///     rank u8, rank dims as u32
///     product(dims) values as IEEE-754 f64
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(std::ostream& out, const NamedTensors& tensors);
NamedTensors read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

NamedTensors to_named(const ParamStore& store);
/// Assigns every named tensor into `store`; names and shapes must match exactly.
void restore(ParamStore& store, const NamedTensors& tensors);

std::string checkpoint_bytes(const NamedTensors& tensors);
/// FNV-1a hash of the serialized checkpoint bytes.
std::uint64_t checkpoint_hash(const ParamStore& store);

}  // namespace loraloop::num
