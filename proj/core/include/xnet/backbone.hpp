#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xnet/tensor.hpp"

namespace xnet {

/// Named parameters, ordered by name. Iteration order is the canonical order
/// used for checkpoints and optimizer state.
using ParamMap = std::map<std::string, Tensor>;

inline constexpr int kNumStages = 4;
inline constexpr double kNormEps = 1e-6;

struct BackboneConfig {
  std::array<int, kNumStages> stage_depths{2, 2, 4, 2};
  std::array<int, kNumStages> stage_dims{24, 48, 96, 192};
  int in_channels = 3;
  int num_classes = 12;
  float layer_scale_init = 1e-6f;

  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

/// Which optional parts a backbone instance carries. A decoder that never
/// sees the image has no stem; dense models drop the classifier head.
struct BackboneParts {
  bool stem = true;
  bool head = true;
};

/// Handles onto one block's parameters (aliasing the owning ParamMap).
struct BlockParams {
  Tensor dw_weight, dw_bias;
  Tensor norm_weight, norm_bias;
  Tensor pw1_weight, pw1_bias;
  Tensor pw2_weight, pw2_bias;
  Tensor gamma;
};

/// depthwise 7x7 -> layer_norm -> linear C->4C -> gelu -> linear 4C->C -> ·gamma -> + x
Tensor block_forward(const BlockParams& p, const Tensor& x);

/// Deterministic per-name initialisation: truncated normal (std 0.02) for
/// conv/linear weights, zero biases, unit/zero norm affine, gamma = layer_scale.
void init_parameter(const std::string& name, Tensor& t, std::uint64_t seed, float layer_scale);

/// Four-stage hierarchical network: stem (/4), stages 1..4 joined by
/// downsample layers down2..down4 (/2 each), optional classifier head.
///
/// Parameter names: stem.{conv,norm}.*, stage{i}.block{j}.*, down{i}.{norm,conv}.*,
/// head.{norm,fc}.*  (stages 1-based, blocks 0-based).
class Backbone {
 public:
  Backbone(const BackboneConfig& config, std::uint64_t seed, BackboneParts parts = {});

  const BackboneConfig& config() const noexcept { return config_; }
  const BackboneParts& parts() const noexcept { return parts_; }
  ParamMap& params() noexcept { return params_; }
  const ParamMap& params() const noexcept { return params_; }
  const Tensor& param(const std::string& name) const;
  std::vector<std::string> param_names() const;
  std::int64_t parameter_count() const;

  BlockParams block(int stage, int index) const;

  /// (N,3,H,W) -> (N,C1,H/4,W/4): 4x4 stride-4 conv + layer_norm.
  Tensor stem_forward(const Tensor& image) const;
  /// layer_norm + 2x2 stride-2 conv into stage `stage` (2..4).
  Tensor downsample_forward(int stage, const Tensor& x) const;
  /// Runs the blocks of stage `stage` (1..4).
  Tensor stage_forward(int stage, const Tensor& x) const;
  /// Stage outputs at 1/4, 1/8, 1/16, 1/32 of the input resolution.
  std::array<Tensor, kNumStages> forward_features(const Tensor& image) const;
  /// Global average pool -> layer_norm -> linear.
  Tensor classifier_forward(const Tensor& image) const;

 private:
  BackboneConfig config_;
  BackboneParts parts_;
  ParamMap params_;
};

/// Exact shape of every parameter a backbone with this config/parts owns.
std::map<std::string, Shape> backbone_param_shapes(const BackboneConfig& config, BackboneParts parts = {});

}  // namespace xnet
