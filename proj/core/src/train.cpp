#include "xnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <stdexcept>

#include "xnet/errors.hpp"
#include "xnet/ops.hpp"
#include "xnet/rng.hpp"

namespace xnet {

namespace {

constexpr std::uint64_t kClassifyDataStream = 11;
constexpr std::uint64_t kOrderStream = 12;
constexpr std::uint64_t kFlipStream = 13;
constexpr std::uint64_t kInitStream = 14;

std::vector<std::size_t> shuffled(std::vector<std::size_t> idx, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

void check_finite(double loss, long step) {
  if (!std::isfinite(loss)) {
    throw DivergenceError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")",
                          step);
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  // Wall time would make otherwise identical reports differ byte-wise.
  if (deterministic_mode()) return 0.0;
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

long steps_per_epoch(std::size_t n, int batch) { return static_cast<long>((n + batch - 1) / batch); }

}  // namespace

std::string to_string(PretrainVolume v) {
  switch (v) {
    case PretrainVolume::none: return "none";
    case PretrainVolume::small: return "small";
    case PretrainVolume::full: return "full";
  }
  return "?";
}

PretrainVolume pretrain_volume_from_string(const std::string& name) {
  if (name == "none") return PretrainVolume::none;
  if (name == "small") return PretrainVolume::small;
  if (name == "full") return PretrainVolume::full;
  throw ConfigError("unknown pretrain volume '" + name + "' (expected none, small or full)");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(max_depth > kMinDepth)) throw ConfigError("max_depth must exceed the minimum depth");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must be in [0,1]");
}

OptimizerConfig TrainConfig::optimizer_config() const {
  OptimizerConfig oc;
  oc.kind = optimizer;
  oc.lr = lr;
  oc.weight_decay = weight_decay;
  return oc;
}

TrainConfig default_pretrain_config() {
  TrainConfig c;
  c.epochs = 20;
  c.batch_size = 32;
  c.lr = 2e-3;
  c.weight_decay = 0.05;
  c.flip_augment = false;
  return c;
}

TrainConfig default_finetune_config() { return TrainConfig{}; }

void DataConfig::validate() const {
  if (pretrain_samples < 10) throw ConfigError("pretrain_samples must be >= 10");
  if (dense_samples < 2) throw ConfigError("dense_samples must be >= 2");
  if (height < 32 || width < 32 || height % 32 != 0 || width % 32 != 0) {
    throw ConfigError("image height and width must be positive multiples of 32");
  }
}

Tensor stack_images(const std::vector<const Tensor*>& images, const std::vector<bool>& flip) {
  if (images.empty()) throw ValidationError("stack_images: empty batch");
  const Shape& s = images.front()->shape();
  const std::int64_t c = s[0], h = s[1], w = s[2];
  auto out = Tensor::zeros(Shape{static_cast<std::int64_t>(images.size()), c, h, w});
  auto dst = out.data();
  const std::int64_t per = c * h * w;
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (!(images[n]->shape() == s)) throw ShapeError("stack_images: mixed sample shapes");
    auto src = images[n]->data();
    const bool mirror = !flip.empty() && flip[n];
    for (std::int64_t row = 0; row < c * h; ++row) {
      const float* in = src.data() + row * w;
      float* o = dst.data() + static_cast<std::int64_t>(n) * per + row * w;
      if (mirror) {
        for (std::int64_t x = 0; x < w; ++x) o[x] = in[w - 1 - x];
      } else {
        std::copy(in, in + w, o);
      }
    }
  }
  return out;
}

double classifier_accuracy(const Backbone& net, const std::vector<ClassificationSample>& samples,
                           const std::vector<std::size_t>& indices, int batch_size) {
  if (indices.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < indices.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(indices.size(), b + static_cast<std::size_t>(batch_size));
    std::vector<const Tensor*> imgs;
    for (std::size_t i = b; i < e; ++i) imgs.push_back(&samples[indices[i]].image);
    auto logits = net.classifier_forward(stack_images(imgs));
    const std::int64_t k = logits.dim(1);
    auto d = logits.data();
    for (std::size_t i = b; i < e; ++i) {
      const float* row = d.data() + static_cast<std::int64_t>(i - b) * k;
      const auto arg = std::max_element(row, row + k) - row;
      correct += arg == samples[indices[i]].label;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

PretrainResult pretrain_classifier(const BackboneConfig& backbone, const TrainConfig& cfg, const DataConfig& data,
                                   const ProgressFn& progress) {
  cfg.validate();
  data.validate();
  const LabelSpace space = cfg.pretrain_volume == PretrainVolume::small ? LabelSpace::kinds : LabelSpace::kinds_colors;
  BackboneConfig bc = backbone;
  bc.num_classes = num_classes(space);
  Backbone net(bc, mix_seed(cfg.seed, kInitStream));

  const auto samples =
      gen_classification_set(mix_seed(cfg.seed, kClassifyDataStream), data.pretrain_samples, data.height, data.width, space);
  std::vector<std::size_t> train, val;
  split_indices(cfg.seed, samples.size(), train, val);

  PretrainResult res;
  res.num_classes = bc.num_classes;
  if (cfg.pretrain_volume != PretrainVolume::none) {
    res.trained = true;
    const int epochs = cfg.pretrain_volume == PretrainVolume::small ? std::max(1, cfg.epochs / 4) : cfg.epochs;
    std::vector<Tensor> params;
    for (auto& kv : net.params()) params.push_back(kv.second);
    Optimizer opt(params, cfg.optimizer_config());
    const long per_epoch = steps_per_epoch(train.size(), cfg.batch_size);
    const long total = per_epoch * epochs;
    long step = 0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
      const auto order = shuffled(train, mix_seed(cfg.seed, kOrderStream + 1000 * static_cast<std::uint64_t>(epoch)));
      double loss_sum = 0;
      for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
        std::vector<const Tensor*> imgs;
        std::vector<std::int32_t> labels;
        for (std::size_t i = b; i < e; ++i) {
          imgs.push_back(&samples[order[i]].image);
          labels.push_back(samples[order[i]].label);
        }
        Tape<float> tape;
        TapeScope<float> scope(tape);
        auto loss = ops::softmax_cross_entropy(net.classifier_forward(stack_images(imgs)), labels);
        const double lv = loss.item();
        check_finite(lv, step);
        tape.backward(loss);
        opt.step(warmup_lr(cfg.lr, step, total, cfg.warmup_fraction));
        opt.zero_grad();
        loss_sum += lv;
        ++step;
      }
      res.epoch_loss.push_back(loss_sum / static_cast<double>(per_epoch));
      if (progress) {
        progress("pretrain[" + to_string(cfg.pretrain_volume) + "] epoch " + std::to_string(epoch + 1) + "/" +
                 std::to_string(epochs) + " loss " + std::to_string(res.epoch_loss.back()));
      }
    }
  }
  res.val_accuracy = classifier_accuracy(net, samples, val);
  for (const auto& [name, t] : net.params()) res.checkpoint.emplace(name, t.clone());
  return res;
}

std::vector<std::int32_t> argmax_labels(const Tensor& logits) {
  const std::int64_t n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  std::vector<std::int32_t> out(static_cast<std::size_t>(n * hw));
  auto d = logits.data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t p = 0; p < hw; ++p) {
      std::int32_t best = 0;
      float bv = d[(i * k) * hw + p];
      for (std::int64_t c = 1; c < k; ++c) {
        const float v = d[(i * k + c) * hw + p];
        if (v > bv) {
          bv = v;
          best = static_cast<std::int32_t>(c);
        }
      }
      out[static_cast<std::size_t>(i * hw + p)] = best;
    }
  }
  return out;
}

namespace {

struct DenseBatch {
  Tensor image;
  Tensor depth;
  std::vector<std::int32_t> seg;
};

DenseBatch make_dense_batch(const DenseDataset& ds, const std::vector<std::size_t>& idx, std::size_t b,
                            std::size_t e, const std::vector<bool>& flip) {
  std::vector<const Tensor*> imgs, depths;
  for (std::size_t i = b; i < e; ++i) {
    imgs.push_back(&ds.samples[idx[i]].image);
    depths.push_back(&ds.samples[idx[i]].depth);
  }
  DenseBatch batch{stack_images(imgs, flip), stack_images(depths, flip), {}};
  for (std::size_t i = b; i < e; ++i) {
    const auto& s = ds.samples[idx[i]];
    const bool mirror = !flip.empty() && flip[i - b];
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        const int sx = mirror ? s.width - 1 - x : x;
        batch.seg.push_back(s.seg[static_cast<std::size_t>(y * s.width + sx)]);
      }
    }
  }
  return batch;
}

}  // namespace

MetricReport evaluate_dense(const XNetModel& model, const DenseDataset& ds, const std::vector<std::size_t>& indices,
                            float max_depth, int batch_size) {
  if (indices.empty()) throw ValidationError("evaluate_dense: empty evaluation split");
  MetricReport rep;
  rep.variant = to_string(model.variant());
  rep.task = to_string(model.task());
  std::vector<float> pred_depth, gt_depth;
  ConfusionMatrix cm(model.config().num_seg_classes);
  for (std::size_t b = 0; b < indices.size(); b += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(indices.size(), b + static_cast<std::size_t>(batch_size));
    auto batch = make_dense_batch(ds, indices, b, e, {});
    auto pred = model.predict(batch.image);
    if (model.task() == Task::depth) {
      auto p = pred.data();
      auto g = batch.depth.data();
      pred_depth.insert(pred_depth.end(), p.begin(), p.end());
      gt_depth.insert(gt_depth.end(), g.begin(), g.end());
    } else {
      cm.add(argmax_labels(pred), batch.seg);
    }
  }
  if (model.task() == Task::depth) {
    rep.depth = depth_metrics(pred_depth, gt_depth, max_depth, kMinDepth);
  } else {
    rep.seg = cm.metrics();
  }
  rep.check_ranges();
  return rep;
}

DenseTrainResult train_dense(XNetModel& model, const TrainConfig& cfg, const DenseDataset& ds,
                             const ProgressFn& progress) {
  cfg.validate();
  if (ds.train.empty() || ds.val.empty()) throw ValidationError("train_dense: dataset needs train and val samples");
  const auto t0 = std::chrono::steady_clock::now();
  DenseTrainResult res;
  auto stamp = [&](MetricReport r, int epoch) {
    r.seed = std::to_string(cfg.seed);
    r.epochs = epoch;
    r.wall_time_s = seconds_since(t0);
    return r;
  };
  res.epoch_reports.push_back(stamp(evaluate_dense(model, ds, ds.val, cfg.max_depth), 0));

  Optimizer opt(model.trainable_parameters(), cfg.optimizer_config());
  const long per_epoch = steps_per_epoch(ds.train.size(), cfg.batch_size);
  const long total = per_epoch * cfg.epochs;
  Rng flip_rng(mix_seed(cfg.seed, kFlipStream));
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(ds.train, mix_seed(cfg.seed, kOrderStream + 1000 * static_cast<std::uint64_t>(epoch)));
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::vector<bool> flip(e - b, false);
      if (cfg.flip_augment) {
        for (std::size_t i = 0; i < flip.size(); ++i) flip[i] = flip_rng.below(2) == 1;
      }
      auto batch = make_dense_batch(ds, order, b, e, flip);
      Tape<float> tape;
      TapeScope<float> scope(tape);
      auto pred = model.predict(batch.image);
      auto loss = model.task() == Task::depth ? silog_loss(pred, batch.depth)
                                              : ops::softmax_cross_entropy(pred, batch.seg);
      const double lv = loss.item();
      check_finite(lv, step);
      tape.backward(loss);
      opt.step(warmup_lr(cfg.lr, step, total, cfg.warmup_fraction));
      opt.zero_grad();
      res.step_loss.push_back(lv);
      ++step;
    }
    res.epoch_reports.push_back(stamp(evaluate_dense(model, ds, ds.val, cfg.max_depth), epoch + 1));
    if (progress) {
      progress(to_string(model.variant()) + "/" + to_string(model.task()) + " seed " + std::to_string(cfg.seed) +
               " epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) + " loss " +
               std::to_string(res.step_loss.back()));
    }
  }
  res.report = res.epoch_reports.back();
  return res;
}

PretrainedSet pretrain_all(const AblationConfig& cfg, const ProgressFn& progress) {
  PretrainedSet set;
  auto run = [&](PretrainVolume v, std::uint64_t seed, ParamMap& out, double* acc) {
    TrainConfig tc = cfg.pretrain;
    tc.pretrain_volume = v;
    tc.seed = seed;
    auto r = pretrain_classifier(cfg.backbone, tc, cfg.data, progress);
    out = std::move(r.checkpoint);
    if (acc) *acc = r.val_accuracy;
  };
  run(PretrainVolume::full, cfg.pretrain.seed, set.encoder, &set.encoder_accuracy);
  run(PretrainVolume::full, mix_seed(cfg.pretrain.seed, 1), set.decoder_full, &set.full_accuracy);
  run(PretrainVolume::small, mix_seed(cfg.pretrain.seed, 2), set.decoder_small, &set.small_accuracy);
  run(PretrainVolume::none, mix_seed(cfg.pretrain.seed, 3), set.decoder_none, nullptr);
  return set;
}

std::vector<AblationRow> run_ablation(const AblationConfig& cfg, const ProgressFn& progress) {
  return run_ablation(cfg, pretrain_all(cfg, progress), progress);
}

std::vector<AblationRow> run_ablation(const AblationConfig& cfg, const PretrainedSet& pre,
                                      const ProgressFn& progress) {
  if (cfg.seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (cfg.tasks.empty()) throw ConfigError("ablation needs at least one task");
  cfg.finetune.validate();
  cfg.data.validate();
  const auto ds = gen_dense_set(cfg.data.seed, cfg.data.dense_samples, cfg.data.height, cfg.data.width);

  auto run_row = [&](const std::string& name, const std::string& id, Variant v, const ParamMap* decoder) {
    AblationRow row;
    row.name = name;
    row.id = id;
    row.variant = v;
    for (auto seed : cfg.seeds) {
      std::optional<MetricReport> merged;
      for (Task task : cfg.tasks) {
        try {
          ModelConfig mc;
          mc.backbone = cfg.backbone;
          mc.task = task;
          mc.max_depth = cfg.finetune.max_depth;
          auto built = build_variant(v, &pre.encoder, decoder, mc, mix_seed(seed, kInitStream));
          TrainConfig tc = cfg.finetune;
          tc.seed = seed;
          auto r = train_dense(built.model, tc, ds, progress).report;
          r.variant = id;
          if (!merged) {
            merged = r;
          } else {
            merged = task == Task::segmentation ? merge_reports(*merged, r) : merge_reports(r, *merged);
          }
        } catch (const Error&) {
          // The original error stays reachable (and keeps its category) through std::rethrow_if_nested.
          std::throw_with_nested(std::runtime_error("ablation row '" + name + "' (seed " + std::to_string(seed) +
                                                    ", task " + to_string(task) + ") failed"));
        }
      }
      row.per_seed.push_back(*merged);
    }
    row.mean = average_reports(row.per_seed);
    return row;
  };

  std::vector<AblationRow> rows;
  if (cfg.run_ladder) {
    for (Variant v : kAllVariants) {
      const bool pre_dec = traits(v).pretrained_decoder;
      rows.push_back(run_row(ladder_label(v), to_string(v), v, pre_dec ? &pre.decoder_full : nullptr));
    }
  }
  const std::pair<PretrainVolume, const ParamMap*> volumes[] = {{PretrainVolume::none, &pre.decoder_none},
                                                                {PretrainVolume::small, &pre.decoder_small},
                                                                {PretrainVolume::full, &pre.decoder_full}};
  for (const auto& [vol, ckpt] : volumes) {
    const std::string name = ladder_label(Variant::xnet_i) + "/" + to_string(vol);
    const std::string id = to_string(Variant::xnet_i) + "/" + to_string(vol);
    AblationRow row;
    if (vol == PretrainVolume::full && cfg.run_ladder) {
      // Identical inputs and seeds to the ladder's xNet-I row.
      row = rows[5];
      row.name = name;
      row.id = id;
      for (auto& r : row.per_seed) r.variant = id;
      row.mean.variant = id;
    } else {
      row = run_row(name, id, Variant::xnet_i, ckpt);
    }
    row.volume = vol;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace xnet
