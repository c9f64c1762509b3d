#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xnet/tensor.hpp"

namespace xnet {

struct DepthMetrics {
  double delta1 = 0, delta2 = 0, delta3 = 0;
  double abs_rel = 0, sq_rel = 0, log10 = 0, rms_log = 0, silog = 0, irmse = 0;
};

struct SegMetrics {
  double miou = 0, macc = 0, pixel_acc = 0;
};

/// gt is clamped to [d_min, cap] before comparison. silog is reported x100.
/// ValidationError on size mismatch, empty input or non-positive values.
DepthMetrics depth_metrics(std::span<const float> pred, std::span<const float> gt, float cap = 10.0f,
                           float d_min = 1.0f, double silog_lambda = 0.85);

/// mIoU averages classes present in gt or pred; mAcc averages recall over classes present in gt.
SegMetrics seg_metrics(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, int num_classes);

/// Accumulates a confusion matrix across batches.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);
  void add(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt);
  SegMetrics metrics() const;
  std::int64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt * k_ + pred)]; }

 private:
  int k_;
  std::vector<std::int64_t> counts_;
};

/// sqrt(mean(g^2) - lambda·mean(g)^2) with g = ln(pred) - ln(gt).
template <typename T>
BasicTensor<T> silog_loss(const BasicTensor<T>& pred, const BasicTensor<T>& gt, double lambda = 0.85);

struct MetricReport {
  std::string variant;
  std::string task;
  std::string seed;  // a seed value, or "mean" for aggregates
  int epochs = 0;
  std::optional<DepthMetrics> depth;
  std::optional<SegMetrics> seg;
  double wall_time_s = 0;

  /// ValidationError when any present metric leaves its range.
  void check_ranges() const;
};

/// Field-wise mean over reports (metadata from the first; wall time summed).
MetricReport average_reports(std::span<const MetricReport> reports, const std::string& seed_label = "mean");

/// Folds a segmentation report into a depth report of the same run group.
MetricReport merge_reports(const MetricReport& depth, const MetricReport& seg);

const std::string& csv_header();
/// %.6g floats; metric families absent from the report leave empty fields.
std::string csv_row(const MetricReport& r);
void write_csv(std::ostream& os, std::span<const MetricReport> rows);

}  // namespace xnet
