#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "xnet/tensor.hpp"

namespace xnet {

/// Binary netpbm raster. `maxval` 255 stores one byte per sample, 65535 two
/// bytes (big-endian, as netpbm requires).
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 for PGM, 3 for PPM
  int maxval = 255;
  std::vector<std::uint16_t> samples;  // row-major, channel-interleaved
};

void write_raster(const std::filesystem::path& path, const Raster& raster);
Raster read_raster(const std::filesystem::path& path);

/// (3,H,W) tensor -> 8-bit PPM, values clamped to [0,1] then scaled and rounded.
Raster image_to_ppm(const Tensor& image);
/// 8-bit PPM -> (3,H,W) tensor in [0,1].
Tensor ppm_to_image(const Raster& raster);

/// Depth (1,H,W) -> 16-bit PGM storing round(depth / max_depth · 65535).
Raster depth_to_pgm(const Tensor& depth, float max_depth);

/// Integer labels -> 8-bit PGM.
Raster labels_to_pgm(std::span<const std::int32_t> labels, int height, int width);

}  // namespace xnet
