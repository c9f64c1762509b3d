#include "xnet/xnet_model.hpp"

#include <algorithm>

#include "xnet/errors.hpp"
#include "xnet/ops.hpp"
#include "xnet/rng.hpp"

namespace xnet {

namespace {

struct VariantName {
  Variant v;
  const char* id;
  const char* label;
};

constexpr VariantName kVariantNames[] = {
    {Variant::fpn, "fpn", "FPN"},
    {Variant::rev, "rev", "+Rev"},
    {Variant::rev_pre, "rev_pre", "+22k"},
    {Variant::rev_pre_pfp, "rev_pre_pfp", "+PFP"},
    {Variant::rev_pre_pfp_nofp, "rev_pre_pfp_nofp", "-FP"},
    {Variant::xnet_i, "xnet_i", "xNet-I"},
    {Variant::xnet, "xnet", "xNet"},
};

Tensor new_param(const std::string& name, const Shape& shape, ParamMap& params, std::uint64_t seed,
                 float layer_scale = 1e-6f) {
  auto t = Tensor::zeros(shape);
  init_parameter(name, t, seed, layer_scale);
  t.set_requires_grad(true);
  if (!params.emplace(name, t).second) throw ConfigError("duplicate parameter name '" + name + "'");
  return t;
}

void add_prefixed(ParamMap& dst, const std::string& prefix, const ParamMap& src) {
  for (const auto& [name, t] : src) dst.emplace(prefix + name, t);
}

void check_spatial(const Tensor& t, std::int64_t h, std::int64_t w, const std::string& what) {
  if (t.dim(2) != h || t.dim(3) != w) {
    throw ShapeError(what + " has spatial extent " + std::to_string(t.dim(2)) + "x" + std::to_string(t.dim(3)) +
                     ", expected " + std::to_string(h) + "x" + std::to_string(w));
  }
}

}  // namespace

std::string to_string(Variant v) {
  for (const auto& n : kVariantNames) {
    if (n.v == v) return n.id;
  }
  return "?";
}

Variant variant_from_string(const std::string& name) {
  for (const auto& n : kVariantNames) {
    if (name == n.id) return n.v;
  }
  throw ConfigError("unknown variant '" + name +
                    "' (expected fpn|rev|rev_pre|rev_pre_pfp|rev_pre_pfp_nofp|xnet_i|xnet)");
}

std::string ladder_label(Variant v) {
  for (const auto& n : kVariantNames) {
    if (n.v == v) return n.label;
  }
  return "?";
}

std::string to_string(Task t) { return t == Task::depth ? "depth" : "seg"; }

Task task_from_string(const std::string& name) {
  if (name == "depth") return Task::depth;
  if (name == "seg" || name == "segmentation") return Task::segmentation;
  throw ConfigError("unknown task '" + name + "' (expected depth|seg)");
}

VariantTraits traits(Variant v) {
  VariantTraits t;
  switch (v) {
    case Variant::fpn:
      t.laterals = true;
      break;
    case Variant::rev:
      t.reversed = true;
      t.laterals = true;
      break;
    case Variant::rev_pre:
      t.reversed = t.pretrained_decoder = t.laterals = true;
      break;
    case Variant::rev_pre_pfp:
      t.reversed = t.pretrained_decoder = t.laterals = t.pfp = true;
      break;
    case Variant::rev_pre_pfp_nofp:
      t.reversed = t.pretrained_decoder = t.pfp = true;
      break;
    case Variant::xnet_i:
      t.reversed = t.pretrained_decoder = t.pfp = true;
      t.mix = MixMode::xnet_i;
      t.decoder_stem = true;
      break;
    case Variant::xnet:
      t.reversed = t.pretrained_decoder = t.pfp = true;
      t.mix = MixMode::xnet;
      t.decoder_stem = true;
      break;
  }
  return t;
}

// ------------------------------------------------------------------ RS / PFP

RSModule make_rs_module(const std::string& prefix, int in_channels, int out_channels, int upscale, ParamMap& params,
                        std::uint64_t seed) {
  if (in_channels < 1 || out_channels < 1 || upscale < 1) {
    throw ConfigError("RS module '" + prefix + "' needs positive channel counts and upscale");
  }
  RSModule rs;
  rs.in_channels = in_channels;
  rs.out_channels = out_channels;
  rs.upscale = upscale;
  const std::int64_t cin = in_channels;
  const std::int64_t cexp = static_cast<std::int64_t>(out_channels) * upscale * upscale;
  rs.norm_weight = new_param(prefix + "norm.weight", Shape{cin}, params, seed);
  rs.norm_bias = new_param(prefix + "norm.bias", Shape{cin}, params, seed);
  rs.fc1_weight = new_param(prefix + "fc1.weight", Shape{cin, cin}, params, seed);
  rs.fc1_bias = new_param(prefix + "fc1.bias", Shape{cin}, params, seed);
  rs.fc2_weight = new_param(prefix + "fc2.weight", Shape{cin, cexp}, params, seed);
  rs.fc2_bias = new_param(prefix + "fc2.bias", Shape{cexp}, params, seed);
  return rs;
}

Tensor rs_forward(const RSModule& rs, const Tensor& x) {
  if (x.shape().rank() != 4 || x.dim(1) != rs.in_channels) {
    throw ShapeError("rs_forward: input " + x.shape().str() + " does not have " + std::to_string(rs.in_channels) +
                     " channels");
  }
  auto h = ops::layer_norm(x, 1, rs.norm_weight, rs.norm_bias, kNormEps);
  h = ops::channel_linear(h, rs.fc1_weight, rs.fc1_bias);
  h = ops::gelu(h);
  h = ops::channel_linear(h, rs.fc2_weight, rs.fc2_bias);
  return ops::pixel_shuffle(h, rs.upscale);
}

PostFeaturePyramid make_pfp(const std::string& prefix, const BackboneConfig& cfg, ParamMap& params,
                            std::uint64_t seed) {
  PostFeaturePyramid pfp;
  const int c1 = cfg.stage_dims[0];
  for (int i = 0; i < kNumStages; ++i) {
    pfp.branches[i] = make_rs_module(prefix + "branch" + std::to_string(i + 1) + ".", cfg.stage_dims[i], c1,
                                     1 << i, params, seed);
  }
  pfp.fuse = make_rs_module(prefix + "fuse.", kNumStages * c1, c1, 1, params, seed);
  return pfp;
}

Tensor pfp_forward(const PostFeaturePyramid& pfp, std::span<const Tensor> stage_feats) {
  if (stage_feats.size() != kNumStages) {
    throw ValidationError("pfp_forward: expected 4 stage features, got " + std::to_string(stage_feats.size()));
  }
  const std::int64_t n = stage_feats[0].dim(0);
  const std::int64_t h = stage_feats[0].dim(2), w = stage_feats[0].dim(3);
  for (int i = 0; i < kNumStages; ++i) {
    const auto& f = stage_feats[i];
    const std::int64_t f_scale = std::int64_t{1} << i;
    if (f.shape().rank() != 4 || f.dim(0) != n || f.dim(1) != pfp.branches[i].in_channels ||
        f.dim(2) * f_scale != h || f.dim(3) * f_scale != w) {
      throw ValidationError("pfp_forward: stage " + std::to_string(i + 1) + " feature " + f.shape().str() +
                            " breaks the 1/4,1/8,1/16,1/32 chain anchored at " + stage_feats[0].shape().str());
    }
  }
  std::vector<Tensor> branches;
  branches.reserve(kNumStages);
  for (int i = 0; i < kNumStages; ++i) branches.push_back(rs_forward(pfp.branches[i], stage_feats[i]));
  auto cat = ops::concat_channels<float>(branches);
  return rs_forward(pfp.fuse, cat);
}

Tensor mix_features(MixMode mode, const Tensor& image, const Tensor& stem_out, const Tensor& rs_out) {
  switch (mode) {
    case MixMode::xnet:
      if (stem_out.shape() != rs_out.shape()) {
        throw ShapeError("mix_features(xnet): RS output " + rs_out.shape().str() + " must match stem output " +
                         stem_out.shape().str());
      }
      return ops::mul(stem_out, rs_out);
    case MixMode::xnet_i:
      if (image.shape() != rs_out.shape()) {
        throw ShapeError("mix_features(xnet_i): RS output " + rs_out.shape().str() + " must match image " +
                         image.shape().str());
      }
      return ops::mul(image, rs_out);
    case MixMode::none:
      break;
  }
  throw ConfigError("mix_features: no mixing mode selected");
}

Tensor visualize_mixed(const Tensor& mixed) {
  const Shape& s = mixed.shape();
  if (s.rank() != 3 || s[0] != 3) throw ShapeError("visualize_mixed: expected (3,H,W), got " + s.str());
  const std::int64_t plane = s[1] * s[2];
  auto out = Tensor::zeros(s);
  auto in = mixed.data();
  auto o = out.data();
  for (std::int64_t p = 0; p < plane; ++p) {
    int best = 0;
    for (int c = 1; c < 3; ++c) {
      if (in[c * plane + p] > in[best * plane + p]) best = c;
    }
    // a non-positive maximum renders black, otherwise a second pass would promote a zero channel
    o[best * plane + p] = std::max(in[best * plane + p], 0.0f);
  }
  return out;
}

// ------------------------------------------------------------------- model

XNetModel::XNetModel(Variant variant, const ModelConfig& config, std::uint64_t seed)
    : variant_(variant),
      config_(config),
      encoder_(config.backbone, mix_seed(seed, 1), BackboneParts{.stem = true, .head = false}) {
  config_.backbone.validate();
  if (config_.task == Task::segmentation && config_.num_seg_classes < 2) {
    throw ConfigError("segmentation needs at least 2 classes");
  }
  if (!(config_.max_depth > 0.0f)) throw ConfigError("max_depth must be positive");
  if (config_.backbone.in_channels != 3 && traits(variant).mix == MixMode::xnet_i) {
    throw ConfigError("xnet_i mixes with an RGB image; in_channels must be 3");
  }

  const auto& cfg = config_.backbone;
  const auto tr = traits(variant);
  const std::uint64_t head_seed = mix_seed(seed, 3);
  add_prefixed(params_, "encoder.", encoder_.params());

  if (tr.reversed) {
    decoder_.emplace(cfg, mix_seed(seed, 2), BackboneParts{.stem = tr.decoder_stem, .head = false});
    add_prefixed(params_, "decoder.", decoder_->params());
    // The RS input branch lifts the 1/32 encoder output to the decoder's entry point.
    const int rs_out = tr.mix == MixMode::xnet_i ? cfg.in_channels : cfg.stage_dims[0];
    const int rs_scale = tr.mix == MixMode::xnet_i ? 32 : 8;
    rs_input_ = make_rs_module("rs_input.", cfg.stage_dims[3], rs_out, rs_scale, params_, head_seed);
    if (tr.pfp) pfp_ = make_pfp("pfp.", cfg, params_, head_seed);
  } else {
    // FPN decoder stage k runs at 1/32, 1/16, 1/8, 1/4 with the mirrored widths.
    for (int k = 0; k < kNumStages; ++k) {
      const int level = kNumStages - 1 - k;
      const std::int64_t c = cfg.stage_dims[level];
      const std::string sp = "fpn.stage" + std::to_string(k + 1) + ".";
      for (int b = 0; b < cfg.stage_depths[level]; ++b) {
        const std::string p = sp + "block" + std::to_string(b) + ".";
        BlockParams bp;
        bp.dw_weight = new_param(p + "dwconv.weight", Shape{c, 1, 7, 7}, params_, head_seed);
        bp.dw_bias = new_param(p + "dwconv.bias", Shape{c}, params_, head_seed);
        bp.norm_weight = new_param(p + "norm.weight", Shape{c}, params_, head_seed);
        bp.norm_bias = new_param(p + "norm.bias", Shape{c}, params_, head_seed);
        bp.pw1_weight = new_param(p + "pw1.weight", Shape{c, 4 * c}, params_, head_seed);
        bp.pw1_bias = new_param(p + "pw1.bias", Shape{4 * c}, params_, head_seed);
        bp.pw2_weight = new_param(p + "pw2.weight", Shape{4 * c, c}, params_, head_seed);
        bp.pw2_bias = new_param(p + "pw2.bias", Shape{c}, params_, head_seed);
        bp.gamma = new_param(p + "gamma", Shape{c}, params_, head_seed, cfg.layer_scale_init);
        fpn_blocks_[k].push_back(bp);
      }
      if (k > 0) {
        const std::int64_t cprev = cfg.stage_dims[level + 1];
        const std::string p = "fpn.proj" + std::to_string(k + 1) + ".";
        fpn_proj_w_[k] = new_param(p + "weight", Shape{cprev, c}, params_, head_seed);
        fpn_proj_b_[k] = new_param(p + "bias", Shape{c}, params_, head_seed);
      }
    }
  }

  if (tr.laterals) {
    if (tr.reversed) {
      for (int st = 2; st <= kNumStages; ++st) laterals_.push_back({st, st});
    } else {
      // FPN stage k (k = 2..4) receives the encoder feature at its resolution.
      for (int k = 2; k <= kNumStages; ++k) laterals_.push_back({kNumStages + 1 - k, k});
    }
  }

  const std::int64_t head_in = (tr.reversed && !tr.pfp) ? cfg.stage_dims[3] : cfg.stage_dims[0];
  head_w_ = new_param("head.weight", Shape{head_in, config_.output_channels()}, params_, head_seed);
  head_b_ = new_param("head.bias", Shape{config_.output_channels()}, params_, head_seed);
}

Backbone& XNetModel::decoder() {
  if (!decoder_) throw ConfigError("variant " + to_string(variant_) + " has no reversed decoder backbone");
  return *decoder_;
}

const Backbone& XNetModel::decoder() const {
  if (!decoder_) throw ConfigError("variant " + to_string(variant_) + " has no reversed decoder backbone");
  return *decoder_;
}

std::vector<Tensor> XNetModel::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_) {
    if (config_.freeze_encoder && name.rfind("encoder.", 0) == 0) continue;
    out.push_back(t);
  }
  return out;
}

Tensor XNetModel::apply_head(const Tensor& feature, std::int64_t out_h, std::int64_t out_w) const {
  auto y = ops::channel_linear(feature, head_w_, head_b_);
  y = ops::resize_bilinear(y, out_h, out_w);
  if (config_.task == Task::depth) y = ops::scale(ops::sigmoid(y), config_.max_depth);
  return y;
}

Tensor XNetModel::forward_fpn(const std::array<Tensor, kNumStages>& enc, ForwardResult& res) const {
  Tensor x = enc[3];
  res.decoder_input = x;
  for (int k = 0; k < kNumStages; ++k) {
    if (k > 0) {
      // Project then upsample; both maps are linear so the order only changes cost.
      auto up = ops::channel_linear(x, fpn_proj_w_[k], fpn_proj_b_[k]);
      up = ops::resize_bilinear(up, x.dim(2) * 2, x.dim(3) * 2);
      x = ops::add(enc[kNumStages - 1 - k], up);
    }
    for (const auto& bp : fpn_blocks_[k]) x = block_forward(bp, x);
    res.decoder_stages[k] = x;
  }
  return x;
}

Tensor XNetModel::forward_reversed(const Tensor& image, const std::array<Tensor, kNumStages>& enc,
                                   const ForwardOptions& opts, ForwardResult& res) const {
  const auto tr = traits(variant_);
  const Backbone& dec = *decoder_;
  auto rs_out = rs_forward(*rs_input_, enc[3]);
  if (opts.force_rs_ones) rs_out = Tensor::full(rs_out.shape(), 1.0f);

  Tensor x;
  switch (tr.mix) {
    case MixMode::none:
      x = rs_out;
      res.decoder_input = x;
      break;
    case MixMode::xnet: {
      auto stem = dec.stem_forward(image);
      x = mix_features(MixMode::xnet, image, stem, rs_out);
      res.mixed = x;
      res.decoder_input = x;
      break;
    }
    case MixMode::xnet_i:
      res.mixed = mix_features(MixMode::xnet_i, image, Tensor{}, rs_out);
      res.decoder_input = res.mixed;
      x = dec.stem_forward(res.mixed);
      break;
  }

  const std::int64_t h4 = image.dim(2) / 4, w4 = image.dim(3) / 4;
  for (int st = 1; st <= kNumStages; ++st) {
    if (st > 1) x = dec.downsample_forward(st, x);
    if (tr.laterals && st > 1) x = ops::add(x, enc[st - 1]);
    x = dec.stage_forward(st, x);
    check_spatial(x, h4 >> (st - 1), w4 >> (st - 1), "decoder stage " + std::to_string(st));
    res.decoder_stages[st - 1] = x;
  }
  if (pfp_) return pfp_forward(*pfp_, res.decoder_stages);
  return x;
}

ForwardResult XNetModel::forward(const Tensor& image, const ForwardOptions& opts) const {
  const Shape& s = image.shape();
  if (s.rank() != 4 || s[1] != config_.backbone.in_channels || s[2] % 32 != 0 || s[3] % 32 != 0) {
    throw ShapeError("model input " + s.str() + " must be (N," + std::to_string(config_.backbone.in_channels) +
                     ",H,W) with H and W divisible by 32");
  }
  ForwardResult res;
  res.encoder_stages = encoder_.forward_features(image);
  for (int i = 0; i < kNumStages; ++i) {
    check_spatial(res.encoder_stages[i], s[2] >> (i + 2), s[3] >> (i + 2), "encoder stage " + std::to_string(i + 1));
  }
  Tensor feature = traits(variant_).reversed ? forward_reversed(image, res.encoder_stages, opts, res)
                                             : forward_fpn(res.encoder_stages, res);
  res.prediction = apply_head(feature, s[2], s[3]);
  return res;
}

// ------------------------------------------------------------------ loading

RemapPolicy decoder_policy(Variant v) { return RemapPolicy{.include_stem = traits(v).decoder_stem}; }

LoadReport remap_into_decoder(const ParamMap& checkpoint, XNetModel& model) {
  return remap_into_decoder(checkpoint, model.decoder().params(), decoder_policy(model.variant()));
}

BuildResult build_variant(Variant variant, const ParamMap* encoder_ckpt, const ParamMap* decoder_ckpt,
                          const ModelConfig& config, std::uint64_t seed) {
  const auto tr = traits(variant);
  if (tr.pretrained_decoder && decoder_ckpt == nullptr) {
    throw ConfigError("variant " + to_string(variant) + " requires a pre-trained decoder checkpoint");
  }
  if (!tr.pretrained_decoder && decoder_ckpt != nullptr) {
    throw ConfigError("variant " + to_string(variant) + " has a randomly initialised decoder; "
                      "no decoder checkpoint is accepted");
  }
  BuildResult res{XNetModel(variant, config, seed), std::nullopt, std::nullopt};
  if (encoder_ckpt) {
    res.encoder_report = remap_into_decoder(*encoder_ckpt, res.model.encoder().params(), RemapPolicy{true});
  }
  if (decoder_ckpt) res.decoder_report = remap_into_decoder(*decoder_ckpt, res.model);
  return res;
}

}  // namespace xnet
