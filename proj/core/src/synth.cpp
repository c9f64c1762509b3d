#include "xnet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "xnet/errors.hpp"
#include "xnet/image_io.hpp"
#include "xnet/rng.hpp"

namespace xnet {

namespace {

constexpr float kBucketColors[kNumColorBuckets][3] = {
    {0.95f, 0.25f, 0.20f},  // red
    {0.20f, 0.85f, 0.30f},  // green
    {0.25f, 0.35f, 0.95f},  // blue
    {0.95f, 0.85f, 0.20f},  // yellow
};

constexpr double kRectAspect = 0.65;
constexpr std::uint64_t kSplitStream = 0x5EED5917ULL;

float shade(float depth) { return 0.3f + 0.7f * (kMinDepth / depth); }

ShapeSpec random_shape(Rng& rng, int height, int width, double min_scale, double max_scale) {
  ShapeSpec s;
  s.kind = static_cast<ShapeKind>(rng.below(kNumShapeKinds));
  s.color_bucket = static_cast<int>(rng.below(kNumColorBuckets));
  const double unit = std::min(height, width) / 64.0;
  s.scale = rng.uniform(min_scale, max_scale) * unit;
  s.cx = rng.uniform(s.scale, width - s.scale);
  s.cy = rng.uniform(s.scale, height - s.scale);
  s.depth = static_cast<float>(rng.uniform(kMinDepth, 0.9 * kMaxDepth));
  return s;
}

}  // namespace

bool shape_covers(const ShapeSpec& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  switch (s.kind) {
    case ShapeKind::circle:
      return dx * dx + dy * dy <= s.scale * s.scale;
    case ShapeKind::rectangle:
      return std::abs(dx) <= s.scale && std::abs(dy) <= kRectAspect * s.scale;
    case ShapeKind::triangle: {
      // Apex at the top centre, base along the bottom edge of the bounding box.
      if (dy < -s.scale || dy > s.scale) return false;
      const double half_width = (dy + s.scale) / 2.0;
      return std::abs(dx) <= half_width;
    }
  }
  return false;
}

void validate_scene(const SceneSpec& spec) {
  if (spec.height < 1 || spec.width < 1) throw ValidationError("scene extents must be positive");
  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    const auto& s = spec.shapes[i];
    const std::string tag = "shape " + std::to_string(i);
    if (static_cast<int>(s.kind) >= kNumShapeKinds) {
      throw ValidationError(tag + ": unknown kind");
    }
    if (s.color_bucket < 0 || s.color_bucket >= kNumColorBuckets) throw ValidationError(tag + ": bad colour bucket");
    if (!(s.scale > 0.0)) throw ValidationError(tag + ": scale must be positive");
    if (!(s.depth >= kMinDepth && s.depth <= kMaxDepth)) throw ValidationError(tag + ": depth outside [1,10]");
    if (s.cx - s.scale < 0.0 || s.cx + s.scale > spec.width || s.cy - s.scale < 0.0 || s.cy + s.scale > spec.height) {
      throw ValidationError(tag + ": extends outside the " + std::to_string(spec.height) + "x" +
                            std::to_string(spec.width) + " image");
    }
  }
}

DenseSample render_scene(const SceneSpec& spec) {
  validate_scene(spec);
  const int h = spec.height, w = spec.width;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  DenseSample out;
  out.height = h;
  out.width = w;
  out.image = Tensor::zeros(Shape{3, h, w});
  out.depth = Tensor::full(Shape{1, h, w}, kMaxDepth);
  out.seg.assign(static_cast<std::size_t>(plane), 0);
  auto img = out.image.data();
  auto dep = out.depth.data();
  for (int y = 0; y < h; ++y) {
    const float bg = 0.30f + 0.20f * static_cast<float>(y) / static_cast<float>(h);
    for (int x = 0; x < w; ++x) {
      const std::int64_t p = static_cast<std::int64_t>(y) * w + x;
      const ShapeSpec* nearest = nullptr;
      for (const auto& s : spec.shapes) {
        if (shape_covers(s, x + 0.5, y + 0.5) && (nearest == nullptr || s.depth < nearest->depth)) nearest = &s;
      }
      if (nearest == nullptr) {
        for (int c = 0; c < 3; ++c) img[c * plane + p] = bg;
        continue;
      }
      const float f = shade(nearest->depth);
      for (int c = 0; c < 3; ++c) img[c * plane + p] = kBucketColors[nearest->color_bucket][c] * f;
      dep[p] = nearest->depth;
      out.seg[static_cast<std::size_t>(p)] = 1 + static_cast<int>(nearest->kind);
    }
  }
  return out;
}

SceneSpec random_scene(std::uint64_t seed, int height, int width, int min_shapes, int max_shapes) {
  if (min_shapes < 0 || max_shapes < min_shapes) throw ValidationError("invalid shape count range");
  Rng rng(seed);
  SceneSpec spec;
  spec.seed = seed;
  spec.height = height;
  spec.width = width;
  const int count = min_shapes + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_shapes - min_shapes + 1)));
  for (int i = 0; i < count; ++i) spec.shapes.push_back(random_shape(rng, height, width, 5.0, 16.0));
  return spec;
}

int num_classes(LabelSpace space) {
  return space == LabelSpace::kinds ? kNumShapeKinds : kNumShapeKinds * kNumColorBuckets;
}

std::vector<ClassificationSample> gen_classification_set(std::uint64_t seed, int n, int height, int width,
                                                         LabelSpace space) {
  if (n < 1) throw ValidationError("classification set size must be >= 1");
  std::vector<ClassificationSample> out;
  out.reserve(static_cast<std::size_t>(n));
  const int k = num_classes(space);
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    const int cls = i % k;
    SceneSpec spec;
    spec.seed = seed;
    spec.height = height;
    spec.width = width;
    ShapeSpec s = random_shape(rng, height, width, 10.0, 24.0);
    if (space == LabelSpace::kinds_colors) {
      s.kind = static_cast<ShapeKind>(cls / kNumColorBuckets);
      s.color_bucket = cls % kNumColorBuckets;
    } else {
      s.kind = static_cast<ShapeKind>(cls);
    }
    spec.shapes.push_back(s);
    out.push_back({render_scene(spec).image, cls});
  }
  return out;
}

void split_indices(std::uint64_t seed, std::size_t n, std::vector<std::size_t>& train, std::vector<std::size_t>& val) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(mix_seed(seed, kSplitStream));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::size_t n_val = (n + 5) / 10;
  if (n >= 2) n_val = std::max<std::size_t>(n_val, 1);
  val.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
}

DenseSample gen_dense_sample(std::uint64_t seed, std::size_t index, int height, int width) {
  return render_scene(random_scene(mix_seed(seed, index), height, width, 1, 5));
}

DenseDataset gen_dense_set(std::uint64_t seed, int n, int height, int width) {
  if (n < 1) throw ValidationError("dense set size must be >= 1");
  DenseDataset ds;
  ds.samples.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    ds.samples.push_back(gen_dense_sample(seed, static_cast<std::size_t>(i), height, width));
  }
  split_indices(seed, static_cast<std::size_t>(n), ds.train, ds.val);
  return ds;
}

void dump_dense_sample(const std::filesystem::path& dir, std::size_t index, const DenseSample& sample) {
  char stem[16];
  std::snprintf(stem, sizeof(stem), "%05zu", index);
  write_raster(dir / (std::string(stem) + "_image.ppm"), image_to_ppm(sample.image));
  write_raster(dir / (std::string(stem) + "_depth.pgm"), depth_to_pgm(sample.depth, kMaxDepth));
  write_raster(dir / (std::string(stem) + "_seg.pgm"), labels_to_pgm(sample.seg, sample.height, sample.width));
}

}  // namespace xnet
