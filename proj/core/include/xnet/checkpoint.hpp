#pragma once

// Named-parameter archive (.xck). Byte layout, little-endian throughout:
//
//   magic "XNETCKPT" (8 bytes) | version u32 | entry count u32
//   per entry, sorted by name:
//     name length u32 | name bytes (UTF-8) | ndim u32 | dims u32 x ndim | data f32 x prod(dims)

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xnet/backbone.hpp"

namespace xnet {

inline constexpr char kCheckpointMagic[8] = {'X', 'N', 'E', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const ParamMap& params);
ParamMap deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ParamMap& params, const std::filesystem::path& path);
ParamMap load_checkpoint(const std::filesystem::path& path);

struct RemapPolicy {
  bool include_stem = true;
};

struct LoadReport {
  std::vector<std::string> loaded;   // checkpoint names copied into the target
  std::vector<std::string> skipped;  // checkpoint names deliberately not copied
};

/// Copies a classifier checkpoint into decoder parameters: stage*/down* always,
/// stem.* when policy.include_stem, never head.*. Every expected name must be
/// present with an identical shape; values are copied in place so existing
/// handles onto the target tensors stay valid.
LoadReport remap_into_decoder(const ParamMap& checkpoint, ParamMap& decoder, RemapPolicy policy);

/// Copies every entry of `source` into the same-named tensor of `target`.
/// Names absent from the target, or shape mismatches, raise LoadError; so do
/// target names missing from the source unless `allow_missing`.
void load_params_into(const ParamMap& source, ParamMap& target, bool allow_missing = false);

bool is_valid_utf8(std::string_view s);

}  // namespace xnet
