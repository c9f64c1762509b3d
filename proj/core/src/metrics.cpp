#include "xnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "xnet/errors.hpp"
#include "xnet/ops.hpp"

namespace xnet {

DepthMetrics depth_metrics(std::span<const float> pred, std::span<const float> gt, float cap, float d_min,
                           double silog_lambda) {
  if (pred.size() != gt.size()) {
    throw ValidationError("depth_metrics: pred has " + std::to_string(pred.size()) + " values, gt has " +
                          std::to_string(gt.size()));
  }
  if (pred.empty()) throw ValidationError("depth_metrics: empty input");
  double d1 = 0, d2 = 0, d3 = 0, abs_rel = 0, sq_rel = 0, l10 = 0, sq_log = 0, sum_log = 0, inv = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i];
    double g = gt[i];
    if (!(p > 0.0) || !(g > 0.0)) {
      throw ValidationError("depth_metrics: non-positive value at index " + std::to_string(i));
    }
    g = std::clamp(g, static_cast<double>(d_min), static_cast<double>(cap));
    const double ratio = std::max(p / g, g / p);
    d1 += ratio < 1.25;
    d2 += ratio < 1.25 * 1.25;
    d3 += ratio < 1.25 * 1.25 * 1.25;
    const double diff = p - g;
    abs_rel += std::abs(diff) / g;
    sq_rel += diff * diff / g;
    l10 += std::abs(std::log10(p) - std::log10(g));
    const double lg = std::log(p) - std::log(g);
    sq_log += lg * lg;
    sum_log += lg;
    const double di = 1.0 / p - 1.0 / g;
    inv += di * di;
  }
  const double n = static_cast<double>(pred.size());
  DepthMetrics m;
  m.delta1 = d1 / n;
  m.delta2 = d2 / n;
  m.delta3 = d3 / n;
  m.abs_rel = abs_rel / n;
  m.sq_rel = sq_rel / n;
  m.log10 = l10 / n;
  m.rms_log = std::sqrt(sq_log / n);
  const double mean_g = sum_log / n;
  m.silog = 100.0 * std::sqrt(std::max(0.0, sq_log / n - silog_lambda * mean_g * mean_g));
  m.irmse = std::sqrt(inv / n);
  return m;
}

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  if (num_classes < 1) throw ValidationError("num_classes must be >= 1");
  counts_.assign(static_cast<std::size_t>(k_) * k_, 0);
}

void ConfusionMatrix::add(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt) {
  if (pred.size() != gt.size()) throw ValidationError("seg_metrics: pred and gt sizes differ");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= k_ || gt[i] < 0 || gt[i] >= k_) {
      throw ValidationError("seg_metrics: label out of range [0," + std::to_string(k_) + ") at index " +
                            std::to_string(i));
    }
    ++counts_[static_cast<std::size_t>(gt[i] * k_ + pred[i])];
  }
}

SegMetrics ConfusionMatrix::metrics() const {
  std::int64_t total = 0, correct = 0;
  double iou_sum = 0, acc_sum = 0;
  int iou_n = 0, acc_n = 0;
  for (int c = 0; c < k_; ++c) {
    std::int64_t gt_c = 0, pred_c = 0;
    for (int j = 0; j < k_; ++j) {
      gt_c += at(c, j);
      pred_c += at(j, c);
    }
    const std::int64_t tp = at(c, c);
    total += gt_c;
    correct += tp;
    if (gt_c + pred_c > 0) {
      iou_sum += static_cast<double>(tp) / static_cast<double>(gt_c + pred_c - tp);
      ++iou_n;
    }
    if (gt_c > 0) {
      acc_sum += static_cast<double>(tp) / static_cast<double>(gt_c);
      ++acc_n;
    }
  }
  if (total == 0) throw ValidationError("seg_metrics: empty input");
  return {iou_sum / iou_n, acc_sum / acc_n, static_cast<double>(correct) / static_cast<double>(total)};
}

SegMetrics seg_metrics(std::span<const std::int32_t> pred, std::span<const std::int32_t> gt, int num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, gt);
  return cm.metrics();
}

template <typename T>
BasicTensor<T> silog_loss(const BasicTensor<T>& pred, const BasicTensor<T>& gt, double lambda) {
  if (!(pred.shape() == gt.shape())) {
    throw ShapeError("silog_loss: pred " + pred.shape().str() + " vs gt " + gt.shape().str());
  }
  auto g = ops::sub(ops::log(pred), ops::log(gt));
  auto mean_sq = ops::mean_all(ops::mul(g, g));
  auto mean = ops::mean_all(g);
  auto var = ops::sub(mean_sq, ops::scale(ops::mul(mean, mean), lambda));
  return ops::sqrt(var);
}

template Tensor silog_loss(const Tensor&, const Tensor&, double);
template Tensor64 silog_loss(const Tensor64&, const Tensor64&, double);

namespace {

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

void require(bool ok, const MetricReport& r, const char* name, double v) {
  if (!ok) {
    throw ValidationError("metric " + std::string(name) + " = " + std::to_string(v) + " out of range for " +
                          r.variant + "/" + r.task);
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

void MetricReport::check_ranges() const {
  if (depth) {
    const auto& d = *depth;
    require(in_unit(d.delta1), *this, "delta1", d.delta1);
    require(in_unit(d.delta2), *this, "delta2", d.delta2);
    require(in_unit(d.delta3), *this, "delta3", d.delta3);
    require(d.delta1 <= d.delta2 && d.delta2 <= d.delta3, *this, "delta ordering", d.delta1);
    for (auto [name, v] : {std::pair{"abs_rel", d.abs_rel}, {"sq_rel", d.sq_rel}, {"log10", d.log10},
                           {"rms_log", d.rms_log}, {"silog", d.silog}, {"irmse", d.irmse}}) {
      require(v >= 0.0 && std::isfinite(v), *this, name, v);
    }
  }
  if (seg) {
    require(in_unit(seg->miou), *this, "miou", seg->miou);
    require(in_unit(seg->macc), *this, "macc", seg->macc);
    require(in_unit(seg->pixel_acc), *this, "pixel_acc", seg->pixel_acc);
  }
}

MetricReport average_reports(std::span<const MetricReport> reports, const std::string& seed_label) {
  if (reports.empty()) throw ValidationError("average_reports: no reports");
  MetricReport out = reports.front();
  out.seed = seed_label;
  out.wall_time_s = 0;
  const double n = static_cast<double>(reports.size());
  if (out.depth) *out.depth = DepthMetrics{};
  if (out.seg) *out.seg = SegMetrics{};
  for (const auto& r : reports) {
    out.wall_time_s += r.wall_time_s;
    if (out.depth) {
      if (!r.depth) throw ValidationError("average_reports: mixed depth/non-depth reports");
      auto& a = *out.depth;
      const auto& b = *r.depth;
      a.delta1 += b.delta1 / n;
      a.delta2 += b.delta2 / n;
      a.delta3 += b.delta3 / n;
      a.abs_rel += b.abs_rel / n;
      a.sq_rel += b.sq_rel / n;
      a.log10 += b.log10 / n;
      a.rms_log += b.rms_log / n;
      a.silog += b.silog / n;
      a.irmse += b.irmse / n;
    }
    if (out.seg) {
      if (!r.seg) throw ValidationError("average_reports: mixed seg/non-seg reports");
      out.seg->miou += r.seg->miou / n;
      out.seg->macc += r.seg->macc / n;
      out.seg->pixel_acc += r.seg->pixel_acc / n;
    }
  }
  return out;
}

MetricReport merge_reports(const MetricReport& depth, const MetricReport& seg) {
  MetricReport out = depth;
  out.task = "depth+seg";
  out.seg = seg.seg;
  out.wall_time_s = depth.wall_time_s + seg.wall_time_s;
  return out;
}

const std::string& csv_header() {
  static const std::string h =
      "variant,task,seed,epochs,delta1,delta2,delta3,abs_rel,sq_rel,log10,rms_log,silog,irmse,miou,macc,pixel_acc,"
      "wall_time_s";
  return h;
}

std::string csv_row(const MetricReport& r) {
  std::string s = r.variant + "," + r.task + "," + r.seed + "," + std::to_string(r.epochs);
  if (r.depth) {
    const auto& d = *r.depth;
    for (double v : {d.delta1, d.delta2, d.delta3, d.abs_rel, d.sq_rel, d.log10, d.rms_log, d.silog, d.irmse}) {
      s += "," + fmt(v);
    }
  } else {
    s += ",,,,,,,,,";
  }
  if (r.seg) {
    s += "," + fmt(r.seg->miou) + "," + fmt(r.seg->macc) + "," + fmt(r.seg->pixel_acc);
  } else {
    s += ",,,";
  }
  s += "," + fmt(r.wall_time_s);
  return s;
}

void write_csv(std::ostream& os, std::span<const MetricReport> rows) {
  os << csv_header() << '\n';
  for (const auto& r : rows) os << csv_row(r) << '\n';
}

}  // namespace xnet
