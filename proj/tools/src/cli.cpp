#include "xnet/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "xnet/checkpoint.hpp"
#include "xnet/config.hpp"
#include "xnet/errors.hpp"
#include "xnet/image_io.hpp"
#include "xnet/metrics.hpp"
#include "xnet/ops.hpp"
#include "xnet/synth.hpp"
#include "xnet/train.hpp"
#include "xnet/xnet_model.hpp"

namespace fs = std::filesystem;

namespace xnet::cli {

namespace {

struct Common {
  std::string config;
  bool quiet = false;
};

RunConfig load_config(const Common& c) {
  return c.config.empty() ? RunConfig{} : load_run_config(c.config);
}

ProgressFn progress_to(std::ostream& err, const Common& c) {
  if (c.quiet) return {};
  return [&err](const std::string& line) { err << line << '\n'; };
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string index_stem(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05zu", i);
  return buf;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--seeds expects a comma separated list of non-negative integers, got '" + text + "'");
    }
    seeds.push_back(std::stoull(item));
  }
  if (seeds.empty()) throw UsageError("--seeds must name at least one seed");
  return seeds;
}

/// Task is recovered from the head width stored in a model checkpoint.
Task task_of_checkpoint(const ParamMap& ckpt) {
  auto it = ckpt.find("head.weight");
  if (it == ckpt.end() || it->second.shape().rank() != 2) {
    throw LoadError("checkpoint has no 'head.weight' matrix; is it a dense model checkpoint?");
  }
  return it->second.dim(1) == 1 ? Task::depth : Task::segmentation;
}

XNetModel load_model(const fs::path& path, Variant variant, const RunConfig& cfg) {
  auto ckpt = load_checkpoint(path);
  ModelConfig mc = cfg.model_config();
  mc.task = task_of_checkpoint(ckpt);
  XNetModel model(variant, mc, 0);
  load_params_into(ckpt, model.params());
  return model;
}

Tensor batch_of_one(const Tensor& image) {
  const Shape& s = image.shape();
  return ops::reshape(image, Shape{1, s[0], s[1], s[2]});
}

Tensor drop_batch(const Tensor& t) {
  const Shape& s = t.shape();
  return ops::reshape(t, Shape{s[1], s[2], s[3]});
}

// ------------------------------------------------------------------ commands

struct PretrainArgs {
  Common common;
  std::string out;
  std::string volume;
  std::optional<std::uint64_t> seed;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(a.common);
  TrainConfig tc = cfg.pretrain;
  if (!a.volume.empty()) tc.pretrain_volume = pretrain_volume_from_string(a.volume);
  if (a.seed) tc.seed = *a.seed;
  auto res = pretrain_classifier(cfg.backbone, tc, cfg.data, progress_to(err, a.common));
  if (fs::path(a.out).has_parent_path()) make_dirs(fs::path(a.out).parent_path());
  save_checkpoint(res.checkpoint, a.out);
  out << "pretrain volume=" << to_string(tc.pretrain_volume) << " seed=" << tc.seed
      << " classes=" << res.num_classes;
  if (res.trained) {
    out << " val_accuracy=" << fmt4(res.val_accuracy) << '\n';
  } else {
    out << " untrained val_accuracy=" << fmt4(res.val_accuracy) << '\n';
  }
  return kOk;
}

struct TrainArgs {
  Common common;
  std::string variant;
  std::string task;
  std::string encoder;
  std::string decoder;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool dump_predictions = false;
};

void dump_predictions(const XNetModel& model, const DenseDataset& ds, float max_depth, const fs::path& dir) {
  make_dirs(dir);
  for (std::size_t i : ds.val) {
    const auto& s = ds.samples[i];
    auto pred = model.predict(batch_of_one(s.image));
    if (model.task() == Task::depth) {
      write_raster(dir / (index_stem(i) + "_depth.pgm"), depth_to_pgm(drop_batch(pred), max_depth));
    } else {
      write_raster(dir / (index_stem(i) + "_seg.pgm"), labels_to_pgm(argmax_labels(pred), s.height, s.width));
    }
  }
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(a.common);
  cfg.variant = variant_from_string(a.variant);
  cfg.task = task_from_string(a.task);
  TrainConfig tc = cfg.finetune;
  if (a.seed) tc.seed = *a.seed;
  if (traits(cfg.variant).pretrained_decoder && a.decoder.empty()) {
    throw UsageError("variant " + a.variant + " has a pre-trained decoder and requires --decoder CKPT");
  }
  const ParamMap encoder = load_checkpoint(a.encoder);
  std::optional<ParamMap> decoder;
  if (!a.decoder.empty()) decoder = load_checkpoint(a.decoder);

  auto built = build_variant(cfg.variant, &encoder, decoder ? &*decoder : nullptr, cfg.model_config(), tc.seed);
  const auto ds = gen_dense_set(cfg.data.seed, cfg.data.dense_samples, cfg.data.height, cfg.data.width);
  auto res = train_dense(built.model, tc, ds, progress_to(err, a.common));

  const fs::path dir(a.out);
  make_dirs(dir);
  save_checkpoint(built.model.params(), dir / "model.xck");
  std::ostringstream csv;
  const MetricReport rows[] = {res.report};
  write_csv(csv, rows);
  write_text(dir / "metrics.csv", csv.str());
  if (a.dump_predictions) dump_predictions(built.model, ds, tc.max_depth, dir / "predictions");

  out << "train variant=" << a.variant << " task=" << a.task << " seed=" << tc.seed << " epochs=" << tc.epochs;
  if (res.report.depth) out << " abs_rel=" << fmt4(res.report.depth->abs_rel) << " delta1=" << fmt4(res.report.depth->delta1);
  if (res.report.seg) out << " miou=" << fmt4(res.report.seg->miou) << " pixel_acc=" << fmt4(res.report.seg->pixel_acc);
  out << '\n';
  return kOk;
}

struct EvalArgs {
  Common common;
  std::string model;
  std::string variant;
  std::string out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream&) {
  RunConfig cfg = load_config(a.common);
  const Variant v = variant_from_string(a.variant);
  auto model = load_model(a.model, v, cfg);
  const auto ds = gen_dense_set(cfg.data.seed, cfg.data.dense_samples, cfg.data.height, cfg.data.width);
  auto rep = evaluate_dense(model, ds, ds.val, cfg.finetune.max_depth);
  rep.seed = "-";
  std::ostringstream csv;
  const MetricReport rows[] = {rep};
  write_csv(csv, rows);
  if (a.out.empty()) {
    out << csv.str();
  } else {
    write_text(a.out, csv.str());
  }
  return kOk;
}

struct AblateArgs {
  Common common;
  std::string seeds;
  std::string out;
};

void print_summary(std::ostream& out, const std::vector<AblationRow>& rows) {
  std::vector<const AblationRow*> order;
  for (const auto& r : rows) order.push_back(&r);
  const bool by_depth = rows.front().mean.depth.has_value();
  std::stable_sort(order.begin(), order.end(), [by_depth](const AblationRow* a, const AblationRow* b) {
    return by_depth ? a->mean.depth->abs_rel < b->mean.depth->abs_rel : a->mean.seg->miou > b->mean.seg->miou;
  });
  char line[160];
  std::snprintf(line, sizeof(line), "%-5s %-14s %10s %10s %10s %10s\n", "rank", "row", "abs_rel", "delta1", "miou",
                "pixel_acc");
  out << line;
  int rank = 1;
  for (const auto* r : order) {
    const auto& m = r->mean;
    auto cell = [](const std::optional<double>& v) { return v ? fmt4(*v) : std::string("-"); };
    std::snprintf(line, sizeof(line), "%-5d %-14s %10s %10s %10s %10s\n", rank++, r->name.c_str(),
                  cell(m.depth ? std::optional(m.depth->abs_rel) : std::nullopt).c_str(),
                  cell(m.depth ? std::optional(m.depth->delta1) : std::nullopt).c_str(),
                  cell(m.seg ? std::optional(m.seg->miou) : std::nullopt).c_str(),
                  cell(m.seg ? std::optional(m.seg->pixel_acc) : std::nullopt).c_str());
    out << line;
  }
}

int cmd_ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
  RunConfig cfg = load_config(a.common);
  if (!a.seeds.empty()) cfg.seeds = parse_seeds(a.seeds);
  const AblationConfig ac = cfg.ablation_config();
  const auto progress = progress_to(err, a.common);
  const fs::path dir(a.out);
  make_dirs(dir);

  const auto pre = pretrain_all(ac, progress);
  save_checkpoint(pre.encoder, dir / "encoder.xck");
  save_checkpoint(pre.decoder_none, dir / "decoder_none.xck");
  save_checkpoint(pre.decoder_small, dir / "decoder_small.xck");
  save_checkpoint(pre.decoder_full, dir / "decoder_full.xck");
  out << "pretrained encoder val_accuracy=" << fmt4(pre.encoder_accuracy)
      << " decoder_small=" << fmt4(pre.small_accuracy) << " decoder_full=" << fmt4(pre.full_accuracy) << '\n';

  const auto rows = run_ablation(ac, pre, progress);
  std::vector<MetricReport> csv_rows;
  for (const auto& r : rows) csv_rows.push_back(r.mean);
  for (const auto& r : rows) csv_rows.insert(csv_rows.end(), r.per_seed.begin(), r.per_seed.end());
  for (const auto& r : csv_rows) r.check_ranges();
  std::ostringstream csv;
  write_csv(csv, csv_rows);
  write_text(dir / "ablation.csv", csv.str());
  print_summary(out, rows);
  return kOk;
}

struct VizArgs {
  Common common;
  std::string model;
  std::string variant = "xnet_i";
  std::size_t input = 0;
  std::string out;
};

int cmd_viz(const VizArgs& a, std::ostream& out, std::ostream&) {
  const Variant v = variant_from_string(a.variant);
  if (v != Variant::xnet_i) {
    throw UsageError("viz needs --variant xnet_i: only that variant mixes at the 3-channel image");
  }
  RunConfig cfg = load_config(a.common);
  auto model = load_model(a.model, v, cfg);
  if (a.input >= static_cast<std::size_t>(cfg.data.dense_samples)) {
    throw UsageError("--input " + std::to_string(a.input) + " is outside the dense set of " +
                     std::to_string(cfg.data.dense_samples) + " samples");
  }
  const auto sample = gen_dense_sample(cfg.data.seed, a.input, cfg.data.height, cfg.data.width);
  auto res = model.forward(batch_of_one(sample.image));

  // Positive rescaling for display keeps each pixel's argmax channel unchanged.
  Tensor mixed = drop_batch(res.mixed).clone();
  float peak = 0.0f;
  for (float x : mixed.data()) peak = std::max(peak, x);
  if (peak > 0.0f) {
    for (float& x : mixed.data()) x /= peak;
  }
  const Tensor viz = visualize_mixed(mixed);

  const fs::path dir(a.out);
  make_dirs(dir);
  const std::string stem = index_stem(a.input);
  write_raster(dir / (stem + "_input.ppm"), image_to_ppm(sample.image));
  write_raster(dir / (stem + "_mixed.ppm"), image_to_ppm(mixed));
  write_raster(dir / (stem + "_mixed_viz.ppm"), image_to_ppm(viz));
  if (model.task() == Task::depth) {
    write_raster(dir / (stem + "_prediction.pgm"), depth_to_pgm(drop_batch(res.prediction), cfg.finetune.max_depth));
  } else {
    write_raster(dir / (stem + "_prediction.pgm"),
                 labels_to_pgm(argmax_labels(res.prediction), sample.height, sample.width));
  }
  out << "viz wrote 4 files to " << dir.string() << '\n';
  return kOk;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON run config (defaults apply to omitted keys)");
  sub->add_flag("--quiet", c.quiet, "Suppress progress lines on stderr");
}

}  // namespace

std::string describe(const std::exception& e) {
  std::string msg = e.what();
  try {
    std::rethrow_if_nested(e);
  } catch (const std::exception& inner) {
    msg += ": " + describe(inner);
  } catch (...) {
  }
  return msg;
}

int exit_code_for(const std::exception& e) {
  try {
    std::rethrow_if_nested(e);
  } catch (const std::exception& inner) {
    return exit_code_for(inner);
  } catch (...) {
  }
  if (dynamic_cast<const DivergenceError*>(&e)) return kDiverged;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const fs::filesystem_error*>(&e)) {
    return kIo;
  }
  return kUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"xnet: pre-trained encoder x pre-trained decoder experiments on synthetic data", "xnet"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  PretrainArgs pa;
  auto* pretrain = app.add_subcommand("pretrain", "Pre-train a classifier backbone and save its checkpoint");
  add_common(pretrain, pa.common);
  pretrain->add_option("--out", pa.out, "Checkpoint path to write")->required();
  pretrain->add_option("--volume", pa.volume, "Pre-training volume: none, small or full (default: config)")
      ->check(CLI::IsMember({"none", "small", "full"}));
  pretrain->add_option("--seed", pa.seed, "Seed (default: config pretrain.seed)");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Fine-tune one variant on the synthetic dense task");
  add_common(train, ta.common);
  train->add_option("--variant", ta.variant, "fpn, rev, rev_pre, rev_pre_pfp, rev_pre_pfp_nofp, xnet_i or xnet")
      ->required();
  train->add_option("--task", ta.task, "depth or seg")->required()->check(CLI::IsMember({"depth", "seg"}));
  train->add_option("--encoder", ta.encoder, "Encoder checkpoint (classifier save)")->required();
  train->add_option("--decoder", ta.decoder, "Decoder checkpoint; required by pre-trained-decoder variants");
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--seed", ta.seed, "Seed (default: config finetune.seed)");
  train->add_flag("--dump-predictions", ta.dump_predictions, "Write one prediction PGM per validation sample");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a trained model checkpoint on the validation split");
  add_common(eval, ea.common);
  eval->add_option("--model", ea.model, "Model checkpoint written by train")->required();
  eval->add_option("--variant", ea.variant, "Variant the checkpoint was trained as")->required();
  eval->add_option("--out", ea.out, "CSV path (default: standard output)");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "Run the 7-row ladder and the 3-row pre-training volume sweep");
  add_common(ablate, aa.common);
  ablate->add_option("--seeds", aa.seeds, "Comma separated fine-tuning seeds (default: config seeds)");
  ablate->add_option("--out", aa.out, "Output directory")->required();

  VizArgs va;
  auto* viz = app.add_subcommand("viz", "Render the mixed image of an xnet_i model for one dense sample");
  add_common(viz, va.common);
  viz->add_option("--model", va.model, "Model checkpoint written by train")->required();
  viz->add_option("--variant", va.variant, "Must be xnet_i");
  viz->add_option("--input", va.input, "Dense sample index")->required();
  viz->add_option("--out", va.out, "Output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    out << sub->help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kUsage;
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(pa, out, err);
    if (train->parsed()) return cmd_train(ta, out, err);
    if (eval->parsed()) return cmd_eval(ea, out, err);
    if (ablate->parsed()) return cmd_ablate(aa, out, err);
    if (viz->parsed()) return cmd_viz(va, out, err);
  } catch (const std::exception& e) {
    err << "error: " << describe(e) << '\n';
    return exit_code_for(e);
  }
  return kUsage;
}

}  // namespace xnet::cli
