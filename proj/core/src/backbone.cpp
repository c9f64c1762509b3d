#include "xnet/backbone.hpp"

#include <string_view>

#include "xnet/errors.hpp"
#include "xnet/ops.hpp"
#include "xnet/rng.hpp"

namespace xnet {

namespace {

constexpr int kBlockKernel = 7;
constexpr int kMlpRatio = 4;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

std::string block_prefix(int stage, int index) {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(index) + ".";
}

}  // namespace

void BackboneConfig::validate() const {
  for (int i = 0; i < kNumStages; ++i) {
    if (stage_depths[i] < 1) throw ConfigError("stage_depths entries must be positive");
    if (stage_dims[i] < 1) throw ConfigError("stage_dims entries must be positive");
  }
  if (in_channels < 1) throw ConfigError("in_channels must be positive");
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
}

std::map<std::string, Shape> backbone_param_shapes(const BackboneConfig& cfg, BackboneParts parts) {
  cfg.validate();
  std::map<std::string, Shape> shapes;
  const auto& d = cfg.stage_dims;
  if (parts.stem) {
    shapes["stem.conv.weight"] = Shape{d[0], cfg.in_channels, 4, 4};
    shapes["stem.conv.bias"] = Shape{d[0]};
    shapes["stem.norm.weight"] = Shape{d[0]};
    shapes["stem.norm.bias"] = Shape{d[0]};
  }
  for (int s = 0; s < kNumStages; ++s) {
    const std::int64_t c = d[s];
    if (s > 0) {
      const std::string p = "down" + std::to_string(s + 1) + ".";
      shapes[p + "norm.weight"] = Shape{d[s - 1]};
      shapes[p + "norm.bias"] = Shape{d[s - 1]};
      shapes[p + "conv.weight"] = Shape{c, d[s - 1], 2, 2};
      shapes[p + "conv.bias"] = Shape{c};
    }
    for (int b = 0; b < cfg.stage_depths[s]; ++b) {
      const std::string p = block_prefix(s + 1, b);
      shapes[p + "dwconv.weight"] = Shape{c, 1, kBlockKernel, kBlockKernel};
      shapes[p + "dwconv.bias"] = Shape{c};
      shapes[p + "norm.weight"] = Shape{c};
      shapes[p + "norm.bias"] = Shape{c};
      shapes[p + "pw1.weight"] = Shape{c, kMlpRatio * c};
      shapes[p + "pw1.bias"] = Shape{kMlpRatio * c};
      shapes[p + "pw2.weight"] = Shape{kMlpRatio * c, c};
      shapes[p + "pw2.bias"] = Shape{c};
      shapes[p + "gamma"] = Shape{c};
    }
  }
  if (parts.head) {
    shapes["head.norm.weight"] = Shape{d[3]};
    shapes["head.norm.bias"] = Shape{d[3]};
    shapes["head.fc.weight"] = Shape{d[3], cfg.num_classes};
    shapes["head.fc.bias"] = Shape{cfg.num_classes};
  }
  return shapes;
}

void init_parameter(const std::string& name, Tensor& t, std::uint64_t seed, float layer_scale) {
  auto data = t.data();
  if (ends_with(name, "gamma")) {
    std::fill(data.begin(), data.end(), layer_scale);
  } else if (ends_with(name, "bias")) {
    std::fill(data.begin(), data.end(), 0.0f);
  } else if (name.find("norm.") != std::string::npos) {
    std::fill(data.begin(), data.end(), 1.0f);
  } else {
    Rng rng(mix_seed(seed, fnv1a(name)));
    for (auto& v : data) v = static_cast<float>(rng.trunc_normal(0.02));
  }
}

Backbone::Backbone(const BackboneConfig& config, std::uint64_t seed, BackboneParts parts)
    : config_(config), parts_(parts) {
  for (const auto& [name, shape] : backbone_param_shapes(config_, parts_)) {
    auto t = Tensor::zeros(shape);
    init_parameter(name, t, seed, config_.layer_scale_init);
    t.set_requires_grad(true);
    params_.emplace(name, t);
  }
}

const Tensor& Backbone::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("backbone has no parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> Backbone::param_names() const {
  std::vector<std::string> names;
  names.reserve(params_.size());
  for (const auto& kv : params_) names.push_back(kv.first);
  return names;
}

std::int64_t Backbone::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& kv : params_) n += kv.second.numel();
  return n;
}

BlockParams Backbone::block(int stage, int index) const {
  const std::string p = block_prefix(stage, index);
  return BlockParams{param(p + "dwconv.weight"), param(p + "dwconv.bias"), param(p + "norm.weight"),
                     param(p + "norm.bias"),     param(p + "pw1.weight"),  param(p + "pw1.bias"),
                     param(p + "pw2.weight"),    param(p + "pw2.bias"),    param(p + "gamma")};
}

Tensor block_forward(const BlockParams& p, const Tensor& x) {
  const std::int64_t c = p.gamma.numel();
  if (x.shape().rank() != 4 || x.dim(1) != c) {
    throw ShapeError("block_forward: input " + x.shape().str() + " does not have " + std::to_string(c) +
                     " channels");
  }
  auto h = ops::conv2d(x, p.dw_weight, p.dw_bias,
                       {.stride = 1, .padding = kBlockKernel / 2, .groups = static_cast<int>(c)});
  h = ops::layer_norm(h, 1, p.norm_weight, p.norm_bias, kNormEps);
  h = ops::channel_linear(h, p.pw1_weight, p.pw1_bias);
  h = ops::gelu(h);
  h = ops::channel_linear(h, p.pw2_weight, p.pw2_bias);
  h = ops::mul(h, ops::reshape(p.gamma, Shape{1, c, 1, 1}));
  return ops::add(x, h);
}

Tensor Backbone::stem_forward(const Tensor& image) const {
  if (!parts_.stem) throw ConfigError("this backbone was built without a stem");
  const Shape& s = image.shape();
  if (s.rank() != 4 || s[1] != config_.in_channels) {
    throw ShapeError("stem_forward: expected (N," + std::to_string(config_.in_channels) + ",H,W), got " + s.str());
  }
  if (s[2] % 4 != 0 || s[3] % 4 != 0) {
    throw ShapeError("stem_forward: spatial extents of " + s.str() + " must be divisible by 4");
  }
  auto h = ops::conv2d(image, param("stem.conv.weight"), param("stem.conv.bias"), {.stride = 4});
  return ops::layer_norm(h, 1, param("stem.norm.weight"), param("stem.norm.bias"), kNormEps);
}

Tensor Backbone::downsample_forward(int stage, const Tensor& x) const {
  if (stage < 2 || stage > kNumStages) throw ConfigError("downsample stage must be 2..4");
  const Shape& s = x.shape();
  if (s.rank() != 4 || s[1] != config_.stage_dims[stage - 2]) {
    throw ShapeError("downsample_forward: input " + s.str() + " does not carry " +
                     std::to_string(config_.stage_dims[stage - 2]) + " channels");
  }
  if (s[2] % 2 != 0 || s[3] % 2 != 0) {
    throw ShapeError("downsample_forward: spatial extents of " + s.str() + " must be even");
  }
  const std::string p = "down" + std::to_string(stage) + ".";
  auto h = ops::layer_norm(x, 1, param(p + "norm.weight"), param(p + "norm.bias"), kNormEps);
  return ops::conv2d(h, param(p + "conv.weight"), param(p + "conv.bias"), {.stride = 2});
}

Tensor Backbone::stage_forward(int stage, const Tensor& x) const {
  if (stage < 1 || stage > kNumStages) throw ConfigError("stage must be 1..4");
  Tensor h = x;
  for (int b = 0; b < config_.stage_depths[stage - 1]; ++b) h = block_forward(block(stage, b), h);
  return h;
}

std::array<Tensor, kNumStages> Backbone::forward_features(const Tensor& image) const {
  const Shape& s = image.shape();
  if (s.rank() != 4 || s[2] % 32 != 0 || s[3] % 32 != 0) {
    throw ShapeError("backbone input " + s.str() + " must be (N,C,H,W) with H and W divisible by 32");
  }
  std::array<Tensor, kNumStages> feats;
  Tensor h = stem_forward(image);
  for (int st = 1; st <= kNumStages; ++st) {
    if (st > 1) h = downsample_forward(st, h);
    h = stage_forward(st, h);
    feats[st - 1] = h;
  }
  return feats;
}

Tensor Backbone::classifier_forward(const Tensor& image) const {
  if (!parts_.head) throw ConfigError("this backbone was built without a classifier head");
  auto feats = forward_features(image);
  auto pooled = ops::reduce(ops::ReduceMode::mean, feats[3], {2, 3});
  pooled = ops::layer_norm(pooled, 1, param("head.norm.weight"), param("head.norm.bias"), kNormEps);
  return ops::linear(pooled, param("head.fc.weight"), param("head.fc.bias"));
}

}  // namespace xnet
