#pragma once

#include <string>

#include "kloc/model.hpp"

namespace kloc {

/// Checkpoint binary layout (little-endian):
///   magic "KLOC" | u32 version | u32 json_len + ModelConfig JSON |
///   u32 array_count | per array: u32 name_len + name, u32 ndim,
///   u32 dims[ndim], float32 data.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Parameters& p, const std::string& path);
Parameters load_checkpoint(const std::string& path);

/// FNV-1a over the file bytes, as 16 hex chars. Artifact self-description.
std::string file_hash(const std::string& path);

std::string hash_hex(uint64_t h);

}  // namespace kloc
