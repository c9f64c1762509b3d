#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "xnet/backbone.hpp"
#include "xnet/metrics.hpp"
#include "xnet/optim.hpp"
#include "xnet/synth.hpp"
#include "xnet/xnet_model.hpp"

namespace xnet {

/// none: fresh weights, no training. small: 3 kind classes, a quarter of the
/// epochs. full: 12 kind x colour classes, full schedule.
enum class PretrainVolume { none, small, full };

std::string to_string(PretrainVolume v);
PretrainVolume pretrain_volume_from_string(const std::string& name);

struct TrainConfig {
  int epochs = 15;
  int batch_size = 8;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  float max_depth = kMaxDepth;
  bool flip_augment = true;
  PretrainVolume pretrain_volume = PretrainVolume::full;
  double warmup_fraction = 0.05;

  void validate() const;
  OptimizerConfig optimizer_config() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Classifier pre-training schedule: 20 epochs, batch 32.
TrainConfig default_pretrain_config();
/// Dense fine-tuning schedule: 15 epochs, batch 8, AdamW lr 1e-3, wd 0.01.
TrainConfig default_finetune_config();

struct DataConfig {
  int pretrain_samples = 2000;
  int dense_samples = 500;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 1234;  // dense data; shared by every fine-tuning run

  void validate() const;
  bool operator==(const DataConfig&) const = default;
};

using ProgressFn = std::function<void(const std::string&)>;

struct PretrainResult {
  ParamMap checkpoint;  // full classifier parameters, including head.*
  double val_accuracy = 0;
  int num_classes = 0;
  bool trained = false;
  std::vector<double> epoch_loss;
};

/// Trains a classifier backbone on gen_classification_set data (seeded by
/// cfg.seed). The backbone's num_classes is overridden by the volume's label space.
PretrainResult pretrain_classifier(const BackboneConfig& backbone, const TrainConfig& cfg, const DataConfig& data,
                                   const ProgressFn& progress = {});

/// Accuracy of a classifier on a sample list, evaluated in batches.
double classifier_accuracy(const Backbone& net, const std::vector<ClassificationSample>& samples,
                           const std::vector<std::size_t>& indices, int batch_size = 32);

/// Stacks samples into an (N,3,H,W) batch, optionally mirroring each horizontally.
Tensor stack_images(const std::vector<const Tensor*>& images, const std::vector<bool>& flip = {});

struct DenseTrainResult {
  MetricReport report;                     // final epoch
  std::vector<MetricReport> epoch_reports;  // index 0 = before training
  std::vector<double> step_loss;
};

/// Fine-tunes `model` on ds.train and evaluates on ds.val after every epoch.
DenseTrainResult train_dense(XNetModel& model, const TrainConfig& cfg, const DenseDataset& ds,
                             const ProgressFn& progress = {});

/// Held-out evaluation of a dense model.
MetricReport evaluate_dense(const XNetModel& model, const DenseDataset& ds, const std::vector<std::size_t>& indices,
                            float max_depth, int batch_size = 8);

/// Argmax over the channel axis of (N,K,H,W) logits.
std::vector<std::int32_t> argmax_labels(const Tensor& logits);

struct AblationConfig {
  BackboneConfig backbone;
  TrainConfig pretrain = default_pretrain_config();
  TrainConfig finetune = default_finetune_config();
  DataConfig data;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<Task> tasks{Task::depth, Task::segmentation};
  bool run_ladder = true;  // false: only the three pre-training volume rows
};

struct AblationRow {
  std::string name;  // ladder label, or "xNet-I/<volume>"
  std::string id;    // variant id, or "xnet_i/<volume>"; used in CSV rows
  Variant variant = Variant::xnet_i;
  std::optional<PretrainVolume> volume;  // set for the pre-training volume rows
  MetricReport mean;
  std::vector<MetricReport> per_seed;
};

struct PretrainedSet {
  ParamMap encoder;
  ParamMap decoder_none, decoder_small, decoder_full;
  double encoder_accuracy = 0, small_accuracy = 0, full_accuracy = 0;
};

/// Encoder and every decoder volume, each trained from its own seed.
PretrainedSet pretrain_all(const AblationConfig& cfg, const ProgressFn& progress = {});

/// Ladder rows (in ladder order) followed by the none/small/full volume rows.
std::vector<AblationRow> run_ablation(const AblationConfig& cfg, const ProgressFn& progress = {});
std::vector<AblationRow> run_ablation(const AblationConfig& cfg, const PretrainedSet& pre,
                                      const ProgressFn& progress = {});

}  // namespace xnet
