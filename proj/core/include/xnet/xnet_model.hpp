#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xnet/backbone.hpp"
#include "xnet/checkpoint.hpp"
#include "xnet/tensor.hpp"

namespace xnet {

/// Rows of the ablation ladder, in order.
enum class Variant { fpn, rev, rev_pre, rev_pre_pfp, rev_pre_pfp_nofp, xnet_i, xnet };

inline constexpr std::array<Variant, 7> kAllVariants = {
    Variant::fpn,         Variant::rev,    Variant::rev_pre, Variant::rev_pre_pfp,
    Variant::rev_pre_pfp_nofp, Variant::xnet_i, Variant::xnet};

enum class Task { depth, segmentation };

/// Identifiers used in configs and reports: fpn, rev, rev_pre, rev_pre_pfp, rev_pre_pfp_nofp, xnet_i, xnet.
std::string to_string(Variant v);
Variant variant_from_string(const std::string& name);
/// Ladder labels: FPN, +Rev, +22k, +PFP, -FP, xNet-I, xNet.
std::string ladder_label(Variant v);

/// "depth" / "seg"
std::string to_string(Task t);
Task task_from_string(const std::string& name);

enum class MixMode { none, xnet, xnet_i };

/// Wiring implied by a variant.
struct VariantTraits {
  bool reversed = false;            // decoder runs 1/4 -> 1/32 like a backbone
  bool pretrained_decoder = false;  // decoder weights come from a classifier checkpoint
  bool pfp = false;
  bool laterals = false;
  MixMode mix = MixMode::none;
  bool decoder_stem = false;  // decoder keeps (and loads) its stem
};

VariantTraits traits(Variant v);

/// Layer-norm + two position-wise linear layers + pixel shuffle.
struct RSModule {
  int in_channels = 0;
  int out_channels = 0;
  int upscale = 1;
  Tensor norm_weight, norm_bias;
  Tensor fc1_weight, fc1_bias;  // in -> in
  Tensor fc2_weight, fc2_bias;  // in -> out·r²
};

/// Creates an RS module and registers its parameters under `prefix` in `params`.
RSModule make_rs_module(const std::string& prefix, int in_channels, int out_channels, int upscale,
                        ParamMap& params, std::uint64_t seed);

/// (N,Cin,H,W) -> (N,Cout,rH,rW)
Tensor rs_forward(const RSModule& rs, const Tensor& x);

struct PostFeaturePyramid {
  std::array<RSModule, kNumStages> branches;  // stage i -> 1/4 resolution, upscale 2^(i-1)
  RSModule fuse;                              // concat -> fused, upscale 1
};

PostFeaturePyramid make_pfp(const std::string& prefix, const BackboneConfig& cfg, ParamMap& params,
                            std::uint64_t seed);

/// Stage features must follow the 1/4, 1/8, 1/16, 1/32 chain, in order.
Tensor pfp_forward(const PostFeaturePyramid& pfp, std::span<const Tensor> stage_feats);

/// xnet: stem_out ⊙ rs_out; xnet_i: image ⊙ rs_out.
Tensor mix_features(MixMode mode, const Tensor& image, const Tensor& stem_out, const Tensor& rs_out);

/// Keeps, per pixel, only the channel holding the maximum value (lowest
/// index on ties); the other channels become 0. Input (3,H,W).
Tensor visualize_mixed(const Tensor& mixed_image);

struct ModelConfig {
  BackboneConfig backbone;
  Task task = Task::depth;
  int num_seg_classes = 4;
  float max_depth = 10.0f;
  bool freeze_encoder = false;

  int output_channels() const { return task == Task::depth ? 1 : num_seg_classes; }
};

struct LateralEdge {
  int encoder_stage;  // 1..4
  int decoder_stage;  // 1..4
};

struct ForwardOptions {
  /// Replaces the RS input branch output with ones (mixing identity checks).
  bool force_rs_ones = false;
};

struct ForwardResult {
  Tensor prediction;                             // depth (N,1,H,W) or logits (N,K,H,W)
  Tensor decoder_input;                          // tensor entering the decoder's first stage (or stem for xnet_i)
  Tensor mixed;                                  // product of the mixing step; undefined without mixing
  std::array<Tensor, kNumStages> encoder_stages;
  std::array<Tensor, kNumStages> decoder_stages;  // in decoder execution order
};

class XNetModel {
 public:
  /// Random initialisation of every component.
  XNetModel(Variant variant, const ModelConfig& config, std::uint64_t seed);

  Variant variant() const noexcept { return variant_; }
  const ModelConfig& config() const noexcept { return config_; }
  Task task() const noexcept { return config_.task; }

  /// All parameters, prefixed by component: encoder., decoder., rs_input., pfp., fpn., head.
  ParamMap& params() noexcept { return params_; }
  const ParamMap& params() const noexcept { return params_; }
  /// Parameters the optimizer updates (encoder excluded when frozen).
  std::vector<Tensor> trainable_parameters() const;

  Backbone& encoder() noexcept { return encoder_; }
  const Backbone& encoder() const noexcept { return encoder_; }
  bool has_decoder_backbone() const noexcept { return decoder_.has_value(); }
  /// Reversed decoder backbone; ConfigError for the FPN variant, which has none.
  Backbone& decoder();
  const Backbone& decoder() const;

  const std::vector<LateralEdge>& lateral_edges() const noexcept { return laterals_; }

  ForwardResult forward(const Tensor& image, const ForwardOptions& opts = {}) const;
  Tensor predict(const Tensor& image) const { return forward(image).prediction; }

 private:
  Tensor forward_fpn(const std::array<Tensor, kNumStages>& enc, ForwardResult& res) const;
  Tensor forward_reversed(const Tensor& image, const std::array<Tensor, kNumStages>& enc,
                          const ForwardOptions& opts, ForwardResult& res) const;
  Tensor apply_head(const Tensor& feature, std::int64_t out_h, std::int64_t out_w) const;

  Variant variant_;
  ModelConfig config_;
  Backbone encoder_;
  std::optional<Backbone> decoder_;
  std::optional<RSModule> rs_input_;
  std::optional<PostFeaturePyramid> pfp_;
  std::vector<BlockParams> fpn_blocks_[kNumStages];  // fpn decoder stage i consumes the 1/2^(6-i) feature
  std::array<Tensor, kNumStages> fpn_proj_w_, fpn_proj_b_;
  Tensor head_w_, head_b_;
  std::vector<LateralEdge> laterals_;
  ParamMap params_;
};

struct BuildResult {
  XNetModel model;
  std::optional<LoadReport> encoder_report;
  std::optional<LoadReport> decoder_report;
};

/// Assembles a ladder variant. The encoder checkpoint (classifier save, head
/// skipped) is optional; a decoder checkpoint is required exactly for the
/// variants with a pre-trained decoder.
BuildResult build_variant(Variant variant, const ParamMap* encoder_ckpt, const ParamMap* decoder_ckpt,
                          const ModelConfig& config, std::uint64_t seed);

/// Decoder load policy per variant (stem included only where the decoder sees pixels).
RemapPolicy decoder_policy(Variant v);

/// Loads a classifier checkpoint into the decoder of `model` per the variant policy.
LoadReport remap_into_decoder(const ParamMap& checkpoint, XNetModel& model);

}  // namespace xnet
