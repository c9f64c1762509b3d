// One PASS/FAIL line per acceptance criterion: xnet_acceptance <1-9>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grad_suite.hpp"
#include "support.hpp"
#include "xnet/checkpoint.hpp"
#include "xnet/cli.hpp"
#include "xnet/errors.hpp"
#include "xnet/image_io.hpp"
#include "xnet/metrics.hpp"
#include "xnet/ops.hpp"
#include "xnet/train.hpp"
#include "xnet/xnet_model.hpp"

using namespace xnet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void fail(const std::string& why) {
    if (pass) detail.clear();
    pass = false;
    if (!detail.empty()) detail += "; ";
    detail += why;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

ParamMap classifier_params(const BackboneConfig& cfg, std::uint64_t seed) {
  Backbone net(cfg, seed);
  ParamMap out;
  for (const auto& [name, t] : net.params()) out.emplace(name, t.clone());
  return out;
}

int run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::fprintf(stderr, "cli %s failed (%d): %s\n", args[0].c_str(), code, err.str().c_str());
  return code;
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

// ---------------------------------------------------------------- 1

Outcome gradients() {
  Outcome o;
  const auto rows = xt::run_grad_suite(100);
  double worst = 0;
  std::string worst_op;
  for (const auto& r : rows) {
    if (r.cases < 100) o.fail(r.op + " ran only " + std::to_string(r.cases) + " cases");
    if (!(r.max_rel_error < 1e-5)) {
      o.fail(r.op + " max rel error " + fmt("%.3g", r.max_rel_error) + " (seed " + std::to_string(r.worst_case_seed) +
             ")");
    }
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_op = r.op;
    }
  }
  if (o.pass) {
    o.detail = std::to_string(rows.size()) + " ops x 100 cases, worst " + fmt("%.2e", worst) + " (" + worst_op + ")";
  }
  return o;
}

// ---------------------------------------------------------------- 2

Outcome structure() {
  Outcome o;
  std::int64_t shuffle_cases = 0;
  for (int r : {1, 2, 4}) {
    for (std::int64_t n = 1; n <= 2; ++n) {
      for (std::int64_t c = 1; c <= 3; ++c) {
        for (std::int64_t h = 1; h <= 4; ++h) {
          for (std::int64_t w = 1; w <= 4; ++w) {
            const Shape packed{n, c * r * r, h, w};
            std::vector<float> iota(static_cast<std::size_t>(packed.numel()));
            std::iota(iota.begin(), iota.end(), 0.0f);
            auto x = Tensor::from_data(packed, iota);
            auto y = ops::pixel_shuffle(x, r);
            // a permutation of the input, matching the documented index map
            for (std::int64_t ni = 0; ni < n; ++ni)
              for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t hi = 0; hi < h * r; ++hi)
                  for (std::int64_t wi = 0; wi < w * r; ++wi) {
                    const std::int64_t src =
                        ((ni * c * r * r + ci * r * r + (hi % r) * r + wi % r) * h + hi / r) * w + wi / r;
                    const std::int64_t dst = ((ni * c + ci) * h * r + hi) * w * r + wi;
                    if (y.data()[static_cast<std::size_t>(dst)] != iota[static_cast<std::size_t>(src)]) {
                      o.fail("pixel_shuffle index map r=" + std::to_string(r));
                    }
                  }
            if (xt::values(ops::pixel_unshuffle(y, r)) != xt::values(x)) o.fail("unshuffle(shuffle) r=" + std::to_string(r));
            auto z = Tensor::from_data(y.shape(), iota);
            if (xt::values(ops::pixel_shuffle(ops::pixel_unshuffle(z, r), r)) != xt::values(z)) {
              o.fail("shuffle(unshuffle) r=" + std::to_string(r));
            }
            ++shuffle_cases;
          }
        }
      }
    }
  }

  BackboneConfig bc;
  const ParamMap enc = classifier_params(bc, 11), dec = classifier_params(bc, 12);
  const std::size_t laterals[] = {3, 3, 3, 3, 0, 0, 0};
  for (std::size_t vi = 0; vi < kAllVariants.size(); ++vi) {
    const Variant v = kAllVariants[vi];
    ModelConfig mc;
    auto model = build_variant(v, &enc, traits(v).pretrained_decoder ? &dec : nullptr, mc, 5).model;
    if (model.lateral_edges().size() != laterals[vi]) {
      o.fail(to_string(v) + " has " + std::to_string(model.lateral_edges().size()) + " lateral edges");
    }
    for (auto [h, w] : {std::pair<std::int64_t, std::int64_t>{64, 64}, {96, 64}}) {
      auto res = model.forward(xt::random_tensor(Shape{1, 3, h, w}, 3, 0, 1));
      std::multiset<std::pair<std::int64_t, std::int64_t>> want, dec_got;
      for (int s = 0; s < kNumStages; ++s) want.insert({h >> (s + 2), w >> (s + 2)});
      for (int s = 0; s < kNumStages; ++s) {
        const auto& e = res.encoder_stages[static_cast<std::size_t>(s)];
        if (e.dim(2) != h >> (s + 2) || e.dim(3) != w >> (s + 2)) {
          o.fail(to_string(v) + " encoder stage " + std::to_string(s + 1) + " is " + e.shape().str());
        }
        const auto& d = res.decoder_stages[static_cast<std::size_t>(s)];
        dec_got.insert({d.dim(2), d.dim(3)});
      }
      if (dec_got != want) o.fail(to_string(v) + " decoder resolutions off the 1/4..1/32 chain");
      if (res.prediction.dim(2) != h || res.prediction.dim(3) != w) o.fail(to_string(v) + " prediction size");
    }
  }
  if (o.pass) {
    o.detail = std::to_string(shuffle_cases) + " shuffle shapes; 7 variants at 64x64 and 96x64; lateral counts 3/3/3/3/0/0/0";
  }
  return o;
}

// ---------------------------------------------------------------- 3

Outcome checkpoints() {
  Outcome o;
  const auto dir = xt::scratch_dir("acceptance_3");
  BackboneConfig bc;
  const ParamMap enc = classifier_params(bc, 21), dec = classifier_params(bc, 22);
  auto model = build_variant(Variant::xnet, &enc, &dec, ModelConfig{}, 4).model;
  save_checkpoint(model.params(), dir / "a.xck");
  save_checkpoint(load_checkpoint(dir / "a.xck"), dir / "b.xck");
  if (xt::read_bytes(dir / "a.xck") != xt::read_bytes(dir / "b.xck")) o.fail("save-load-save bytes differ");

  for (bool stem : {true, false}) {
    Backbone target(bc, 23, BackboneParts{.stem = stem, .head = false});
    auto rep = remap_into_decoder(enc, target.params(), RemapPolicy{stem});
    std::set<std::string> want_loaded, want_skipped;
    for (const auto& [name, t] : enc) {
      const bool body = name.rfind("stage", 0) == 0 || name.rfind("down", 0) == 0;
      const bool stem_name = name.rfind("stem.", 0) == 0;
      (body || (stem && stem_name) ? want_loaded : want_skipped).insert(name);
    }
    const std::set<std::string> loaded(rep.loaded.begin(), rep.loaded.end());
    const std::set<std::string> skipped(rep.skipped.begin(), rep.skipped.end());
    if (loaded != want_loaded) o.fail(std::string("loaded set wrong with stem=") + (stem ? "on" : "off"));
    if (skipped != want_skipped) o.fail(std::string("skipped set wrong with stem=") + (stem ? "on" : "off"));
    for (const auto& name : skipped) {
      if (name.rfind("head.", 0) != 0 && !(name.rfind("stem.", 0) == 0 && !stem)) o.fail("skipped non-head " + name);
    }
    for (const auto& name : loaded) {
      const auto a = enc.at(name).data(), b = target.param(name).data();
      if (a.size() != b.size() || std::memcmp(a.data(), b.data(), a.size_bytes()) != 0) o.fail(name + " not bitwise");
    }
  }

  ParamMap bad;
  for (const auto& [name, t] : enc) bad.emplace(name, t.clone());
  const std::string victim = "stage3.block2.dwconv.weight";
  bad[victim] = Tensor::zeros(Shape{96, 1, 5, 5});
  Backbone target(bc, 24, BackboneParts{.stem = true, .head = false});
  try {
    remap_into_decoder(bad, target.params(), RemapPolicy{true});
    o.fail("shape mismatch accepted");
  } catch (const LoadError& e) {
    if (std::string(e.what()).find(victim) == std::string::npos) o.fail("load error does not name " + victim);
  }
  if (o.pass) o.detail = "byte-idempotent; remap sets exact for both stem policies; mismatch names " + victim;
  return o;
}

// ---------------------------------------------------------------- 4

Outcome pretraining() {
  Outcome o;
  auto r = pretrain_classifier(BackboneConfig{}, default_pretrain_config(), DataConfig{});
  o.detail = "val accuracy " + fmt("%.4f", r.val_accuracy) + " on " + std::to_string(r.num_classes) + " classes";
  if (r.num_classes != 12) o.fail("expected 12 classes, got " + std::to_string(r.num_classes));
  if (!(r.val_accuracy >= 0.90)) o.fail("val accuracy " + fmt("%.4f", r.val_accuracy) + " < 0.90");
  return o;
}

// ---------------------------------------------------------------- 5

// Reduced budget so nine pre-training-volume runs per task fit the time limit.
AblationConfig volume_budget() {
  AblationConfig c;
  c.data.dense_samples = 150;
  c.finetune.epochs = 8;
  c.seeds = {0, 1, 2};
  c.run_ladder = false;
  return c;
}

Outcome volume_ordering() {
  Outcome o;
  const auto rows = run_ablation(volume_budget());
  std::map<PretrainVolume, const AblationRow*> by;
  for (const auto& r : rows) by[*r.volume] = &r;
  const double an = by[PretrainVolume::none]->mean.depth->abs_rel, as = by[PretrainVolume::small]->mean.depth->abs_rel,
               af = by[PretrainVolume::full]->mean.depth->abs_rel;
  const double mn = by[PretrainVolume::none]->mean.seg->miou, ms = by[PretrainVolume::small]->mean.seg->miou,
               mf = by[PretrainVolume::full]->mean.seg->miou;
  o.detail = "abs_rel none/small/full " + fmt("%.4f", an) + "/" + fmt("%.4f", as) + "/" + fmt("%.4f", af) +
             ", miou " + fmt("%.4f", mn) + "/" + fmt("%.4f", ms) + "/" + fmt("%.4f", mf);
  const std::string values = o.detail;
  if (!(an > af)) o.fail("abs_rel(none) <= abs_rel(full)");
  if (!(mn < mf)) o.fail("miou(none) >= miou(full)");
  const bool depth_between = af <= as && as <= an;
  const bool seg_between = mn <= ms && ms <= mf;
  if (!depth_between && !seg_between) o.fail("small is not between none and full on either task");
  if (!o.pass) o.detail += " [" + values + "]";
  return o;
}

// ---------------------------------------------------------------- 6

bool in_unit(double v) { return v >= 0 && v <= 1; }

Outcome ladder() {
  Outcome o;
  const auto dir = xt::scratch_dir("acceptance_6");
  write_file(dir / "smoke.json", R"({"pretrain": {"epochs": 1}, "finetune": {"epochs": 1}})");
  if (run_cli({"ablate", "--config", (dir / "smoke.json").string(), "--out", (dir / "out").string(), "--quiet"}) != 0) {
    o.fail("cmd_ablate exited non-zero");
    return o;
  }
  std::ifstream f(dir / "out" / "ablation.csv");
  std::string line;
  std::getline(f, line);
  if (line != csv_header()) o.fail("unexpected header");
  const auto header = split(line, ',');
  std::set<std::string> aggregate_ids;
  int aggregates = 0, rows = 0;
  while (std::getline(f, line)) {
    ++rows;
    const auto cells = split(line, ',');
    if (cells.size() != header.size()) {
      o.fail("row with " + std::to_string(cells.size()) + " cells");
      continue;
    }
    if (cells[2] == "mean") {
      ++aggregates;
      aggregate_ids.insert(cells[0]);
    }
    for (std::size_t i = 4; i + 1 < cells.size(); ++i) {
      if (cells[i].empty()) {
        o.fail(cells[0] + " has an empty " + header[i]);
        continue;
      }
      const double v = std::stod(cells[i]);
      const bool unit = header[i].rfind("delta", 0) == 0 || header[i] == "miou" || header[i] == "macc" ||
                        header[i] == "pixel_acc";
      if (!std::isfinite(v) || (unit ? !in_unit(v) : v < 0)) o.fail(cells[0] + " " + header[i] + " = " + cells[i]);
    }
  }
  if (aggregates != 10) o.fail(std::to_string(aggregates) + " aggregate rows");
  if (aggregate_ids.size() != 10) o.fail(std::to_string(aggregate_ids.size()) + " distinct aggregate ids");
  if (o.pass) o.detail = "10 aggregate rows (+" + std::to_string(rows - aggregates) + " per-seed), all in range";
  return o;
}

// ---------------------------------------------------------------- 7

Outcome metrics() {
  Outcome o;
  auto near = [&](double got, double want, const std::string& what) {
    if (!(std::abs(got - want) <= 1e-6)) o.fail(what + " = " + fmt("%.9g", got) + ", want " + fmt("%.9g", want));
  };
  {
    std::vector<float> p{1.5f, 3.0f, 7.0f}, g = p;
    auto m = depth_metrics(p, g);
    for (double v : {m.abs_rel, m.sq_rel, m.log10, m.rms_log, m.silog, m.irmse}) near(v, 0, "identical error");
    for (double v : {m.delta1, m.delta2, m.delta3}) near(v, 1, "identical delta");
  }
  {
    std::vector<float> p{2.0f}, g{1.0f};
    auto m = depth_metrics(p, g);
    near(m.abs_rel, 1.0, "abs_rel [2] vs [1]");
    near(m.sq_rel, 1.0, "sq_rel [2] vs [1]");
    near(m.delta1, 0.0, "delta1 [2] vs [1]");
    std::vector<float> p2{1.2f}, g2{1.0f};
    near(depth_metrics(p2, g2).delta1, 1.0, "delta1 [1.2] vs [1]");
  }
  {
    std::vector<std::int32_t> gt{0, 0, 1, 1}, pred{0, 0, 0, 0};
    auto m = seg_metrics(pred, gt, 2);
    // confusion: class 0 tp 2 fp 2 fn 0 -> 2/4; class 1 tp 0 -> 0
    near(m.miou, (2.0 / 4 + 0.0) / 2, "miou worked example");
    near(m.macc, (2.0 / 2 + 0.0 / 2) / 2, "macc worked example");
    near(m.pixel_acc, 2.0 / 4, "pixel_acc worked example");
    auto perfect = seg_metrics(gt, gt, 2);
    near(perfect.miou, 1, "perfect miou");
    near(perfect.macc, 1, "perfect macc");
    near(perfect.pixel_acc, 1, "perfect pixel_acc");
  }
  auto gt = xt::random_tensor<double>(Shape{1, 1, 8, 8}, 7, 1, 10);
  auto pred = xt::random_tensor<double>(Shape{1, 1, 8, 8}, 8, 1, 10);
  const double base = silog_loss(pred, gt, 1.0).item();
  double worst = 0;
  for (double s : {0.5, 2.0, 10.0}) {
    const double rel = std::abs(silog_loss(ops::scale(pred, s), gt, 1.0).item() - base) / base;
    worst = std::max(worst, rel);
    if (!(rel <= 1e-6)) o.fail("silog scale " + fmt("%g", s) + " relative change " + fmt("%.3g", rel));
  }
  near(silog_loss(ops::scale(gt, std::exp(1.0)), gt, 0.0).item(), 1.0, "silog pred = e*gt, lambda 0");
  if (o.pass) o.detail = "worked examples within 1e-6; silog scale drift " + fmt("%.2e", worst);
  return o;
}

// ---------------------------------------------------------------- 8

const char* kTinyConfig = R"({
  "backbone": {"stage_dims": [8, 16, 32, 64], "stage_depths": [1, 1, 1, 1]},
  "data": {"pretrain_samples": 32, "dense_samples": 12, "height": 32, "width": 32},
  "pretrain": {"epochs": 2},
  "finetune": {"epochs": 2, "batch_size": 4},
  "seeds": [0, 1]
})";

Outcome visualization() {
  Outcome o;
  const auto dir = xt::scratch_dir("acceptance_8");
  const auto cfg = (dir / "tiny.json").string();
  write_file(cfg, kTinyConfig);
  const auto enc = (dir / "enc.xck").string(), dec = (dir / "dec.xck").string();
  if (run_cli({"pretrain", "--config", cfg, "--out", enc, "--quiet"}) != 0 ||
      run_cli({"pretrain", "--config", cfg, "--out", dec, "--seed", "9", "--quiet"}) != 0 ||
      run_cli({"train", "--config", cfg, "--variant", "xnet_i", "--task", "depth", "--encoder", enc, "--decoder", dec,
               "--out", (dir / "model").string(), "--quiet"}) != 0) {
    o.fail("could not train an xnet_i model");
    return o;
  }
  std::size_t pixels = 0, lit = 0;
  for (int input = 0; input < 12; ++input) {
    const auto out = dir / ("viz" + std::to_string(input));
    if (run_cli({"viz", "--config", cfg, "--model", (dir / "model" / "model.xck").string(), "--input",
                 std::to_string(input), "--out", out.string()}) != 0) {
      o.fail("cmd_viz failed on input " + std::to_string(input));
      continue;
    }
    char name[32];
    std::snprintf(name, sizeof(name), "%05d_mixed_viz.ppm", input);
    const auto r = read_raster(out / name);
    for (std::size_t p = 0; p < r.samples.size() / 3; ++p) {
      int nonzero = 0;
      for (std::size_t c = 0; c < 3; ++c) nonzero += r.samples[p * 3 + c] != 0;
      if (nonzero > 1) o.fail("pixel " + std::to_string(p) + " of input " + std::to_string(input));
      lit += nonzero == 1;
      ++pixels;
    }
    // reapply the rule to the decoded file
    const auto img = ppm_to_image(r);
    if (xt::values(visualize_mixed(img)) != xt::values(img)) o.fail("not idempotent on input " + std::to_string(input));
  }
  if (o.pass) {
    o.detail = std::to_string(pixels) + " pixels over 12 inputs, " + std::to_string(lit) +
               " with one lit channel, none with more; idempotent";
  }
  return o;
}

// ---------------------------------------------------------------- 9

Outcome determinism() {
  Outcome o;
  ::setenv("XNET_DETERMINISTIC", "1", 1);
  const auto root = xt::scratch_dir("acceptance_9");
  const auto cfg = (root / "tiny.json").string();
  write_file(cfg, kTinyConfig);
  std::vector<fs::path> artefacts;
  for (const char* pass : {"a", "b"}) {
    const auto dir = root / pass;
    fs::create_directories(dir);
    const auto enc = (dir / "enc.xck").string(), dec = (dir / "dec.xck").string();
    const std::vector<std::vector<std::string>> commands = {
        {"pretrain", "--config", cfg, "--out", enc, "--quiet"},
        {"pretrain", "--config", cfg, "--out", dec, "--volume", "small", "--seed", "4", "--quiet"},
        {"train", "--config", cfg, "--variant", "xnet", "--task", "seg", "--encoder", enc, "--decoder", dec, "--out",
         (dir / "train").string(), "--quiet"},
        {"eval", "--config", cfg, "--model", (dir / "train" / "model.xck").string(), "--variant", "xnet", "--out",
         (dir / "eval.csv").string()},
        {"ablate", "--config", cfg, "--out", (dir / "ablate").string(), "--quiet"},
    };
    for (const auto& c : commands) {
      if (run_cli(c) != 0) o.fail(c[0] + " failed in pass " + pass);
    }
  }
  if (!o.pass) return o;
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    const auto ext = e.path().extension();
    if (!e.is_regular_file() || (ext != ".xck" && ext != ".csv")) continue;
    const auto twin = root / "b" / fs::relative(e.path(), root / "a");
    if (!fs::exists(twin) || xt::read_bytes(e.path()) != xt::read_bytes(twin)) {
      o.fail(fs::relative(e.path(), root / "a").string() + " differs");
    }
    ++compared;
  }
  if (compared < 10) o.fail("only " + std::to_string(compared) + " artefacts compared");
  if (o.pass) o.detail = std::to_string(compared) + " checkpoints and CSVs byte-identical across two runs";
  return o;
}

struct Criterion {
  const char* name;
  double limit_s;  // 0: no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, Criterion> criteria = {
      {1, {"gradient oracle suite", 180, gradients}},
      {2, {"structure suite", 60, structure}},
      {3, {"checkpoint suite", 60, checkpoints}},
      {4, {"pre-training sanity", 300, pretraining}},
      {5, {"pre-training volume ordering", 1200, volume_ordering}},
      {6, {"ladder completeness", 600, ladder}},
      {7, {"metric correctness", 0, metrics}},
      {8, {"visualization rule", 0, visualization}},
      {9, {"determinism", 0, determinism}},
  };
  const int which = argc > 1 ? std::atoi(argv[1]) : 0;
  if (!criteria.contains(which)) {
    std::fprintf(stderr, "usage: %s <1-9>\n", argv[0]);
    return 2;
  }
  const auto& c = criteria.at(which);
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = c.run();
  } catch (const std::exception& e) {
    o.fail(std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (c.limit_s > 0 && secs > c.limit_s) o.fail("took " + fmt("%.1f", secs) + " s");
  const std::string limit = c.limit_s > 0 ? ", limit " + fmt("%.0f", c.limit_s) + " s" : "";
  std::printf("criterion %d %s: %s (%s; %.1f s%s)\n", which, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs,
              limit.c_str());
  return o.pass ? 0 : 1;
}
