#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "xnet/tensor.hpp"

namespace xnet {

inline constexpr float kMinDepth = 1.0f;
inline constexpr float kMaxDepth = 10.0f;
inline constexpr int kNumShapeKinds = 3;
inline constexpr int kNumColorBuckets = 4;
inline constexpr int kNumSegClasses = 4;  // background + one per shape kind

enum class ShapeKind : std::uint8_t { circle = 0, rectangle = 1, triangle = 2 };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::circle;
  int color_bucket = 0;
  double cx = 0.0, cy = 0.0;  // pixel coordinates of the centre
  double scale = 1.0;         // half-extent of the bounding box
  float depth = kMaxDepth;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int height = 64;
  int width = 64;
  std::vector<ShapeSpec> shapes;
};

struct DenseSample {
  Tensor image;                 // (3,H,W) in [0,1]
  Tensor depth;                 // (1,H,W) in [kMinDepth, kMaxDepth]
  std::vector<std::int32_t> seg;  // H·W labels: 0 background, 1 + kind
  int height = 0;
  int width = 0;
};

/// Whether the pixel centre (px, py) falls inside the shape.
bool shape_covers(const ShapeSpec& s, double px, double py);

/// Throws ValidationError when a shape leaves the image or has bad attributes.
void validate_scene(const SceneSpec& spec);

/// Hard-edged rasterisation; the nearest covering shape wins every pixel.
DenseSample render_scene(const SceneSpec& spec);

/// Random scene with shape_count in [min_shapes, max_shapes]; a pure function of its arguments.
SceneSpec random_scene(std::uint64_t seed, int height, int width, int min_shapes, int max_shapes);

enum class LabelSpace {
  kinds,         // 3 classes: shape kind
  kinds_colors,  // 12 classes: kind·4 + colour bucket
};

int num_classes(LabelSpace space);

struct ClassificationSample {
  Tensor image;  // (3,H,W)
  std::int32_t label = 0;
};

/// Single-shape scenes; the class of sample i is i mod num_classes, so the set
/// is balanced to within one sample per class.
std::vector<ClassificationSample> gen_classification_set(std::uint64_t seed, int n, int height, int width,
                                                         LabelSpace space = LabelSpace::kinds_colors);

struct DenseDataset {
  std::vector<DenseSample> samples;
  std::vector<std::size_t> train;  // indices into samples, ascending
  std::vector<std::size_t> val;
};

/// Sample `index` of gen_dense_set(seed, ...), generated on its own.
DenseSample gen_dense_sample(std::uint64_t seed, std::size_t index, int height, int width);

/// 1-5 shape scenes with a seed-derived 90/10 train/val split.
DenseDataset gen_dense_set(std::uint64_t seed, int n, int height, int width);

/// Deterministic 90/10 split of [0, n).
void split_indices(std::uint64_t seed, std::size_t n, std::vector<std::size_t>& train, std::vector<std::size_t>& val);

/// Writes <dir>/<index>_image.ppm, <index>_depth.pgm (16-bit) and <index>_seg.pgm,
/// with the index zero-padded to 5 digits.
void dump_dense_sample(const std::filesystem::path& dir, std::size_t index, const DenseSample& sample);

}  // namespace xnet
