#include <gtest/gtest.h>

#include <numeric>

#include "support.hpp"
#include "xnet/checkpoint.hpp"
#include "xnet/errors.hpp"
#include "xnet/train.hpp"

using namespace xnet;

namespace {

BackboneConfig tiny_backbone() {
  BackboneConfig b;
  b.stage_dims = {8, 16, 32, 64};
  b.stage_depths = {1, 1, 1, 1};
  return b;
}

DataConfig tiny_data() {
  DataConfig d;
  d.pretrain_samples = 48;
  d.dense_samples = 20;
  d.height = 32;
  d.width = 32;
  return d;
}

TrainConfig tiny_train(int epochs) {
  TrainConfig t = default_finetune_config();
  t.epochs = epochs;
  t.batch_size = 6;
  return t;
}

XNetModel tiny_model(Variant v, Task task, const ParamMap& enc, const ParamMap* dec) {
  ModelConfig mc;
  mc.backbone = tiny_backbone();
  mc.task = task;
  return build_variant(v, &enc, dec, mc, 3).model;
}

ParamMap fresh_classifier(std::uint64_t seed) {
  auto cfg = tiny_backbone();
  Backbone net(cfg, seed);
  ParamMap out;
  for (const auto& [name, t] : net.params()) out.emplace(name, t.clone());
  return out;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(from), v.begin() + static_cast<std::ptrdiff_t>(to),
                         0.0) /
         static_cast<double>(to - from);
}

}  // namespace

TEST(TrainConfig, Validation) {
  EXPECT_NO_THROW(default_finetune_config().validate());
  EXPECT_EQ(default_pretrain_config().batch_size, 32);
  EXPECT_EQ(default_pretrain_config().epochs, 20);
  auto bad = [](auto edit) {
    TrainConfig t;
    edit(t);
    return t;
  };
  EXPECT_THROW(bad([](TrainConfig& t) { t.epochs = -1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& t) { t.batch_size = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& t) { t.lr = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& t) { t.weight_decay = -0.1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](TrainConfig& t) { t.warmup_fraction = 1.5; }).validate(), ConfigError);
  DataConfig d;
  d.height = 48;
  EXPECT_THROW(d.validate(), ConfigError);
  d = DataConfig{};
  d.dense_samples = 1;
  EXPECT_THROW(d.validate(), ConfigError);
  EXPECT_EQ(pretrain_volume_from_string(to_string(PretrainVolume::small)), PretrainVolume::small);
  EXPECT_THROW(pretrain_volume_from_string("huge"), ConfigError);
}

TEST(Helpers, StackImagesAndFlip) {
  auto a = Tensor::from_data(Shape{3, 1, 2}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from_data(Shape{3, 1, 2}, {7, 8, 9, 10, 11, 12});
  auto s = stack_images({&a, &b}, {false, true});
  EXPECT_EQ(s.shape(), (Shape{2, 3, 1, 2}));
  EXPECT_EQ(xt::values(s), (std::vector<double>{1, 2, 3, 4, 5, 6, 8, 7, 10, 9, 12, 11}));
}

TEST(Helpers, ArgmaxLabelsLowestIndexOnTies) {
  // N=1, K=3, 1x2: pixel 0 -> class 2, pixel 1 tie between 0 and 1
  auto logits = Tensor::from_data(Shape{1, 3, 1, 2}, {0.1f, 0.5f, 0.2f, 0.5f, 0.9f, -1.0f});
  EXPECT_EQ(argmax_labels(logits), (std::vector<std::int32_t>{2, 0}));
}

TEST(Pretrain, NoneLeavesWeightsUntrained) {
  TrainConfig t = default_pretrain_config();
  t.epochs = 3;
  t.pretrain_volume = PretrainVolume::none;
  auto r = pretrain_classifier(tiny_backbone(), t, tiny_data());
  EXPECT_FALSE(r.trained);
  EXPECT_TRUE(r.epoch_loss.empty());
  EXPECT_EQ(r.num_classes, 12);
  EXPECT_TRUE(r.checkpoint.contains("head.fc.weight"));
  EXPECT_LT(r.val_accuracy, 0.5);
}

TEST(Pretrain, LossDecreasesAndSmallUsesKinds) {
  TrainConfig t = default_pretrain_config();
  t.epochs = 8;
  t.batch_size = 16;
  auto full = pretrain_classifier(tiny_backbone(), t, tiny_data());
  ASSERT_EQ(full.epoch_loss.size(), 8u);
  EXPECT_LT(full.epoch_loss.back(), full.epoch_loss.front());
  EXPECT_EQ(full.checkpoint.at("head.fc.weight").dim(1), 12);

  t.pretrain_volume = PretrainVolume::small;
  auto small = pretrain_classifier(tiny_backbone(), t, tiny_data());
  EXPECT_EQ(small.num_classes, 3);
  EXPECT_EQ(small.epoch_loss.size(), 2u);  // a quarter of the epochs
}

TEST(Pretrain, Deterministic) {
  TrainConfig t = default_pretrain_config();
  t.epochs = 2;
  auto a = pretrain_classifier(tiny_backbone(), t, tiny_data());
  auto b = pretrain_classifier(tiny_backbone(), t, tiny_data());
  EXPECT_EQ(serialize_checkpoint(a.checkpoint), serialize_checkpoint(b.checkpoint));
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  EXPECT_EQ(a.val_accuracy, b.val_accuracy);
}

TEST(TrainDense, ZeroEpochsReportsUntrainedModel) {
  const auto data = tiny_data();
  auto ds = gen_dense_set(data.seed, data.dense_samples, data.height, data.width);
  const auto enc = fresh_classifier(1);
  auto m = tiny_model(Variant::fpn, Task::depth, enc, nullptr);
  auto before = evaluate_dense(m, ds, ds.val, kMaxDepth);
  auto r = train_dense(m, tiny_train(0), ds);
  before.wall_time_s = r.report.wall_time_s = 0;
  before.seed = r.report.seed;
  EXPECT_TRUE(r.step_loss.empty());
  ASSERT_EQ(r.epoch_reports.size(), 1u);
  EXPECT_EQ(csv_row(r.report), csv_row(before));
  EXPECT_EQ(r.report.epochs, 0);
}

TEST(TrainDense, LossDecreasesForBothTasks) {
  const auto data = tiny_data();
  auto ds = gen_dense_set(data.seed, data.dense_samples, data.height, data.width);
  const auto enc = fresh_classifier(1), dec = fresh_classifier(2);
  for (Task task : {Task::depth, Task::segmentation}) {
    auto m = tiny_model(Variant::xnet_i, task, enc, &dec);
    auto r = train_dense(m, tiny_train(6), ds);
    ASSERT_EQ(r.epoch_reports.size(), 7u);
    const std::size_t n = r.step_loss.size();
    ASSERT_GE(n, 12u);
    EXPECT_LT(mean_of(r.step_loss, n - 3, n), mean_of(r.step_loss, 0, 3)) << to_string(task);
    EXPECT_NO_THROW(r.report.check_ranges());
    EXPECT_EQ(r.report.depth.has_value(), task == Task::depth);
    EXPECT_EQ(r.report.seg.has_value(), task == Task::segmentation);
  }
}

TEST(TrainDense, Deterministic) {
  const auto data = tiny_data();
  auto ds = gen_dense_set(data.seed, data.dense_samples, data.height, data.width);
  const auto enc = fresh_classifier(1), dec = fresh_classifier(2);
  auto run = [&] {
    auto m = tiny_model(Variant::xnet, Task::segmentation, enc, &dec);
    auto r = train_dense(m, tiny_train(2), ds);
    return std::make_pair(serialize_checkpoint(m.params()), r.step_loss);
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainDense, DivergenceIsReported) {
  const auto data = tiny_data();
  auto ds = gen_dense_set(data.seed, data.dense_samples, data.height, data.width);
  const auto enc = fresh_classifier(1);
  auto m = tiny_model(Variant::fpn, Task::segmentation, enc, nullptr);
  auto t = tiny_train(3);
  t.optimizer = OptimizerKind::sgd_momentum;
  t.lr = 1e30;
  t.warmup_fraction = 0;
  EXPECT_THROW(train_dense(m, t, ds), DivergenceError);
}

TEST(Ablation, RowCountsWithTinyBudget) {
  AblationConfig cfg;
  cfg.backbone = tiny_backbone();
  cfg.data = tiny_data();
  cfg.data.pretrain_samples = 24;
  cfg.data.dense_samples = 10;
  cfg.pretrain.epochs = 1;
  cfg.finetune = tiny_train(1);
  cfg.seeds = {0};
  cfg.tasks = {Task::segmentation};
  auto rows = run_ablation(cfg);
  ASSERT_EQ(rows.size(), 10u);
  const char* ids[] = {"fpn", "rev", "rev_pre", "rev_pre_pfp", "rev_pre_pfp_nofp", "xnet_i", "xnet",
                       "xnet_i/none", "xnet_i/small", "xnet_i/full"};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].id, ids[i]);
    EXPECT_EQ(rows[i].per_seed.size(), 1u);
    EXPECT_EQ(rows[i].volume.has_value(), i >= 7);
    EXPECT_NO_THROW(rows[i].mean.check_ranges());
  }

  cfg.run_ladder = false;
  EXPECT_EQ(run_ablation(cfg).size(), 3u);
}
