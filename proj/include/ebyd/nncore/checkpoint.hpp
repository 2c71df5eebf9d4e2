#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ebyd/nncore/model.hpp"

namespace ebyd {

// Binary layout, all integers little-endian u32 unless noted:
//   "EBYD" | version | C H W | K | layer count | per layer: kind u8, units
//   | array count | per array: name length, UTF-8 name, rank, dims, f32 values
// The unit mask and perturbation travel as arrays named "@unit_mask" and
// "@delta/<param>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ModelBundle& model);
ModelBundle decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ModelBundle& model, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);

// FNV-1a over the encoded checkpoint, as 16 hex digits.
std::string checkpoint_digest(const ModelBundle& model);

}  // namespace ebyd
