#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "support.hpp"
#include "xnet/checkpoint.hpp"
#include "xnet/cli.hpp"
#include "xnet/errors.hpp"
#include "xnet/image_io.hpp"
#include "xnet/metrics.hpp"
#include "xnet/synth.hpp"
#include "xnet/xnet_model.hpp"

using namespace xnet;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::size_t line_count(const fs::path& p) {
  std::ifstream f(p);
  std::size_t n = 0;
  for (std::string line; std::getline(f, line);) ++n;
  return n;
}

// Tiny model and data so every subcommand finishes in well under a second.
struct CliFixture : ::testing::Test {
  static void SetUpTestSuite() {
    dir = xt::scratch_dir("cli");
    config = (dir / "tiny.json").string();
    std::ofstream(config) << R"({
      "backbone": {"stage_dims": [8, 16, 32, 64], "stage_depths": [1, 1, 1, 1]},
      "data": {"pretrain_samples": 24, "dense_samples": 10, "height": 32, "width": 32},
      "pretrain": {"epochs": 1},
      "finetune": {"epochs": 1, "batch_size": 4},
      "seeds": [0]
    })";
    encoder = (dir / "enc.xck").string();
    decoder = (dir / "dec.xck").string();
    ASSERT_EQ(run({"pretrain", "--config", config, "--out", encoder, "--quiet"}).code, 0);
    ASSERT_EQ(run({"pretrain", "--config", config, "--out", decoder, "--seed", "5", "--quiet"}).code, 0);
  }

  static fs::path dir;
  static std::string config, encoder, decoder;
};

fs::path CliFixture::dir;
std::string CliFixture::config, CliFixture::encoder, CliFixture::decoder;

}  // namespace

TEST(Cli, HelpListsSubcommandsAndFlags) {
  auto top = run({"--help"});
  EXPECT_EQ(top.code, 0);
  for (const char* s : {"pretrain", "train", "eval", "ablate", "viz"}) EXPECT_NE(top.out.find(s), std::string::npos) << s;
  auto train = run({"train", "--help"});
  EXPECT_EQ(train.code, 0);
  for (const char* s : {"--variant", "--task", "--encoder", "--decoder", "--out", "--seed", "--dump-predictions",
                        "--config"}) {
    EXPECT_NE(train.out.find(s), std::string::npos) << s;
  }
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, cli::kUsage);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kUsage);
  auto missing = run({"pretrain"});
  EXPECT_EQ(missing.code, cli::kUsage);
  EXPECT_NE(missing.err.find("--out"), std::string::npos);
  EXPECT_EQ(run({"train", "--variant", "unet", "--task", "depth", "--encoder", "e", "--out", "o"}).code, cli::kUsage);
  EXPECT_EQ(run({"train", "--variant", "fpn", "--task", "normals", "--encoder", "e", "--out", "o"}).code,
            cli::kUsage);
}

TEST(Cli, ExitCodeMapping) {
  EXPECT_EQ(cli::exit_code_for(DivergenceError("x", 3)), cli::kDiverged);
  EXPECT_EQ(cli::exit_code_for(IoError("x")), cli::kIo);
  EXPECT_EQ(cli::exit_code_for(FormatError("x")), cli::kIo);
  EXPECT_EQ(cli::exit_code_for(ConfigError("x")), cli::kUsage);
  try {
    try {
      throw IoError("disk");
    } catch (...) {
      std::throw_with_nested(ValidationError("while saving"));
    }
  } catch (const std::exception& e) {
    EXPECT_EQ(cli::exit_code_for(e), cli::kIo);
    EXPECT_EQ(cli::describe(e), "while saving: disk");
  }
}

TEST_F(CliFixture, BadConfigNamesTheKey) {
  const auto bad = (dir / "bad.json").string();
  std::ofstream(bad) << R"({"finetune": {"optimiser": "adamw"}})";
  auto r = run({"pretrain", "--config", bad, "--out", (dir / "x.xck").string()});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_NE(r.err.find("finetune.optimiser"), std::string::npos);
  EXPECT_EQ(run({"pretrain", "--config", (dir / "absent.json").string(), "--out", "x"}).code, cli::kIo);
}

TEST_F(CliFixture, PretrainWritesLoadableCheckpoint) {
  auto ckpt = load_checkpoint(encoder);
  EXPECT_TRUE(ckpt.contains("head.fc.weight"));
  EXPECT_TRUE(ckpt.contains("stem.conv.weight"));
}

TEST_F(CliFixture, PretrainedDecoderVariantsRequireDecoder) {
  auto r = run({"train", "--config", config, "--variant", "xnet", "--task", "depth", "--encoder", encoder, "--out",
                (dir / "nodec").string(), "--quiet"});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_NE(r.err.find("--decoder"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "nodec" / "model.xck"));
}

TEST_F(CliFixture, CorruptCheckpointIsIoExit) {
  const auto bad = (dir / "garbage.xck").string();
  std::ofstream(bad) << "not a checkpoint";
  auto r = run({"train", "--config", config, "--variant", "fpn", "--task", "seg", "--encoder", bad, "--out",
                (dir / "garbage").string(), "--quiet"});
  EXPECT_EQ(r.code, cli::kIo);
}

TEST_F(CliFixture, TrainWritesModelMetricsAndPredictions) {
  const auto out = dir / "train_seg";
  auto r = run({"train", "--config", config, "--variant", "xnet_i", "--task", "seg", "--encoder", encoder,
                "--decoder", decoder, "--out", out.string(), "--dump-predictions", "--quiet"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("miou="), std::string::npos);
  EXPECT_TRUE(fs::exists(out / "model.xck"));
  EXPECT_EQ(line_count(out / "metrics.csv"), 2u);
  const auto val = gen_dense_set(1234, 10, 32, 32).val.size();
  std::size_t dumped = 0;
  for (const auto& e : fs::directory_iterator(out / "predictions")) dumped += e.path().extension() == ".pgm";
  EXPECT_EQ(dumped, val);

  auto ev = run({"eval", "--config", config, "--model", (out / "model.xck").string(), "--variant", "xnet_i"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(ev.out.rfind(csv_header(), 0), 0u);
  // eval reproduces the final training metrics from the saved checkpoint
  std::ifstream f(out / "metrics.csv");
  std::string header, row;
  std::getline(f, header);
  std::getline(f, row);
  auto metrics_of = [](const std::string& line) {
    // drop variant,task,seed,epochs and the trailing wall time
    auto first = line.find(',');
    for (int i = 0; i < 3; ++i) first = line.find(',', first + 1);
    return line.substr(first, line.rfind(',') - first);
  };
  const std::string ev_row = ev.out.substr(ev.out.find('\n') + 1);
  EXPECT_EQ(metrics_of(ev_row), metrics_of(row));
}

TEST_F(CliFixture, VizWritesFourFilesObeyingTheRule) {
  const auto tr = dir / "train_depth";
  ASSERT_EQ(run({"train", "--config", config, "--variant", "xnet_i", "--task", "depth", "--encoder", encoder,
                 "--decoder", decoder, "--out", tr.string(), "--quiet"})
                .code,
            0);
  const auto out = dir / "viz";
  auto r = run({"viz", "--config", config, "--model", (tr / "model.xck").string(), "--variant", "xnet_i", "--input",
                "3", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) files += e.is_regular_file();
  EXPECT_EQ(files, 4u);
  auto viz = read_raster(out / "00003_mixed_viz.ppm");
  ASSERT_EQ(viz.channels, 3);
  const std::size_t plane = static_cast<std::size_t>(viz.width * viz.height);
  for (std::size_t p = 0; p < plane; ++p) {
    int nonzero = 0;
    for (std::size_t c = 0; c < 3; ++c) nonzero += viz.samples[p * 3 + c] != 0;
    EXPECT_LE(nonzero, 1);
  }
  auto img = ppm_to_image(viz);
  EXPECT_EQ(xt::values(visualize_mixed(img)), xt::values(img));

  EXPECT_EQ(run({"viz", "--config", config, "--model", (tr / "model.xck").string(), "--variant", "xnet", "--input",
                 "3", "--out", out.string()})
                .code,
            cli::kUsage);
  EXPECT_EQ(run({"viz", "--config", config, "--model", (tr / "model.xck").string(), "--input", "10", "--out",
                 out.string()})
                .code,
            cli::kUsage);
}
