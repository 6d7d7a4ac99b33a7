#pragma once

// Binary model container.
//
//   "WPFCKPT\0"  u32 version
//   i64 base_channels, encoder_blocks, decoder_blocks, input_channels, output_channels
//   u8 pooling_mode   u64 seed   u64 training_step   u8 scalar_bytes
//   u32 tensor_count, then per tensor:
//     u32 name_length, name, u8 kind, i64 rows, i64 cols, rows*cols values (column-major)
//
// Integers and floats are little-endian.

#include <string>

#include "wpfuse/network.hpp"

namespace wpfuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes to `path + ".tmp"` and renames over `path`, so an interrupted
/// write never leaves a truncated checkpoint behind.
void save_checkpoint(const std::string& path, const ModelState<float>& m);

/// Throws IoError on a missing, truncated or foreign file and on any tensor
/// whose name or shape disagrees with the stored configuration.
ModelState<float> load_checkpoint(const std::string& path);

}  // namespace wpfuse
