#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "moa/param_store.hpp"
#include "moa/run_config.hpp"
#include "moa/vit.hpp"

namespace moa {

/// Binary layout:
///   "MOA1" | u32 LE version | u64 LE header length | JSON header | payload
/// The header echoes the run config and lists every parameter (name, shape,
/// frozen flag, byte offset into the payload). The payload is the values as
/// little-endian f64, in table order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  ParamStore params;
};

std::string encode_checkpoint(const RunConfig& config, const ParamStore& params);
/// Throws CheckpointError on any malformed or truncated input.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config,
                     const ParamStore& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Builds the model the config describes and installs the stored values.
/// Throws CheckpointError when the stored table does not match the layout.
ViTModel restore_model(const Checkpoint& checkpoint);

}  // namespace moa
