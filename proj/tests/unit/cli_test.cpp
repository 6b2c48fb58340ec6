#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "toy.hpp"
#include "vitscope/checkpoint.hpp"
#include "vitscope/cli/app.hpp"
#include "vitscope/cli/pipeline.hpp"
#include "vitscope/cli/report.hpp"

namespace vitscope::cli {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Two-block model on a tiny dataset; a full `run` takes a few seconds.
std::string small_config() {
  return "seed: 6\n"
         "model:\n  image_size: 8\n  patch_size: 4\n  n_blocks: 2\n  d_model: 8\n"
         "  n_heads: 2\n  mlp_hidden: 16\n  n_classes: 3\n"
         "dataset:\n  n_per_class: 20\n  n_test_per_class: 10\n  seed: 2\n"
         "trigger:\n  kind: patch\n  patch_size: 2\n  patch_margin: 0\n"
         "train:\n  epochs: 2\n  learning_rate: 0.005\n"
         "analysis:\n  adv_steps: 2\n  detect_t_count: 5\n";
}

fs::path write_config(const fs::path& dir, const std::string& text = small_config()) {
  const auto p = dir / "config.yaml";
  write_text(p, text);
  return p;
}

std::string slurp(const fs::path& p) { return read_file(p); }

TEST(Cli, TrainTwiceGivesIdenticalOutputs) {
  const auto dir = testing::scratch_dir();
  const auto cfg = write_config(dir);
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--out", (dir / "a").string()}).code, kExitOk);
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--out", (dir / "b").string()}).code, kExitOk);
  for (const char* f : {"metrics.csv", "loss.csv", "backdoored.ckpt", "clean.ckpt", "data.archive"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  const std::string metrics = slurp(dir / "a" / "metrics.csv");
  EXPECT_EQ(metrics.substr(0, metrics.find('\n')),
            "model,ca,asr,ra,clean_correct,clean_total,triggered_to_target,"
            "triggered_to_original,triggered_total");
}

TEST(Cli, CreatesNestedOutputDirectory) {
  const auto dir = testing::scratch_dir();
  const auto cfg = write_config(dir);
  const auto out = dir / "deep" / "er" / "run";
  ASSERT_EQ(cli({"train", "--config", cfg.string(), "--out", out.string()}).code, kExitOk);
  EXPECT_TRUE(fs::exists(out / "backdoored.ckpt"));
  EXPECT_TRUE(fs::exists(out / "manifest.txt"));
}

TEST(Cli, MalformedConfigKeyIsReported) {
  const auto dir = testing::scratch_dir();
  const auto cfg = write_config(dir, "seed: 1\ntrain:\n  epochz: 2\n");
  const auto r = cli({"train", "--config", cfg.string(), "--out", dir.string()});
  EXPECT_NE(r.code, kExitOk);
  EXPECT_NE(r.err.find("train.epochz"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("line 3"), std::string::npos) << r.err;
}

TEST(Cli, UsageErrors) {
  EXPECT_NE(cli({}).code, kExitOk);
  EXPECT_NE(cli({"train"}).code, kExitOk);
  EXPECT_NE(cli({"analyze", "sweep", "--checkpoint", "nope", "--out", "x"}).code, kExitOk);
  EXPECT_NE(cli({"frobnicate"}).code, kExitOk);
}

class CliRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "vitscope-tests" / "CliRun";
    fs::remove_all(root_);
    fs::create_directories(root_);
    const auto cfg = write_config(root_);
    for (const char* name : {"one", "two"}) {
      const auto r = cli({"run", "--config", cfg.string(), "--out", (root_ / name).string()});
      ASSERT_EQ(r.code, kExitOk) << r.err;
    }
  }
  static fs::path run_dir() { return root_ / "one"; }
  static fs::path root_;
};

fs::path CliRun::root_;

TEST_F(CliRun, WritesEveryReport) {
  for (const char* f :
       {"metrics.csv", "directions_cls.csv", "directions_all_tokens.csv", "sweep_cls.csv",
        "sweep_all_tokens.csv", "surgery.csv", "adversarial_backdoor_classes.csv",
        "adversarial_backdoor_cosines.csv", "detect_backdoored.csv", "detect_clean.csv",
        "detect_summary.csv", "orthogonalized.ckpt", "manifest.txt"}) {
    EXPECT_TRUE(fs::exists(run_dir() / f)) << f;
  }
}

TEST_F(CliRun, SweepHasOneRowPerBlock) {
  std::istringstream in(slurp(run_dir() / "sweep_cls.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 1u + 2u);
  EXPECT_EQ(lines[0], "layer,asr_plus,ra_minus");
  EXPECT_EQ(lines[1].substr(0, 2), "0,");
  EXPECT_EQ(lines[2].substr(0, 2), "1,");
}

TEST_F(CliRun, CsvReportsAreByteIdenticalAcrossRuns) {
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(run_dir())) {
    if (e.path().extension() != ".csv") continue;
    const auto twin = root_ / "two" / e.path().filename();
    EXPECT_EQ(slurp(e.path()), slurp(twin)) << e.path().filename();
    ++compared;
  }
  EXPECT_GE(compared, 10u);
}

TEST_F(CliRun, ManifestListsFileHashes) {
  std::istringstream in(slurp(run_dir() / "manifest.txt"));
  std::string hash, rel;
  std::size_t size = 0, lines = 0;
  std::string prev;
  while (in >> hash >> size >> rel) {
    ++lines;
    EXPECT_EQ(hash, git_blob_hash_file(run_dir() / rel)) << rel;
    EXPECT_EQ(size, fs::file_size(run_dir() / rel)) << rel;
    EXPECT_LT(prev, rel);
    EXPECT_NE(rel, "manifest.txt");
    prev = rel;
  }
  EXPECT_GT(lines, 10u);
}

TEST_F(CliRun, AnalyzeCommandsAreReproducible) {
  const auto ck = (run_dir() / "backdoored.ckpt").string();
  const auto data = (run_dir() / "data.archive").string();
  for (const char* name : {"x", "y"}) {
    const auto out = (root_ / name).string();
    ASSERT_EQ(cli({"analyze", "derive", "--checkpoint", ck, "--data", data, "--out", out}).code,
              kExitOk);
    ASSERT_EQ(cli({"analyze", "sweep", "--checkpoint", ck, "--data", data, "--out", out,
                   "--mode", "all", "--scale", "2"})
                  .code,
              kExitOk);
    ASSERT_EQ(cli({"analyze", "adversarial", "--checkpoint", ck, "--data", data, "--out", out,
                   "--steps", "2", "--start", "clean"})
                  .code,
              kExitOk);
  }
  for (const char* f : {"directions_cls.csv", "sweep_all_tokens.csv",
                        "adversarial_clean_classes.csv", "adversarial_clean_cosines.csv"}) {
    EXPECT_EQ(slurp(root_ / "x" / f), slurp(root_ / "y" / f)) << f;
  }
}

TEST_F(CliRun, IncompatibleDataIsRejected) {
  const auto dir = testing::scratch_dir();
  ViTConfig other = testing::tiny_config();
  other.image_size = 16;
  save_checkpoint(dir / "other.ckpt", Checkpoint{init_params(other, 1), {}});
  const auto r = cli({"analyze", "derive", "--checkpoint", (dir / "other.ckpt").string(),
                      "--data", (run_dir() / "data.archive").string(), "--out",
                      (dir / "out").string()});
  EXPECT_EQ(r.code, kExitError);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(Cli, DataArchiveMissingTensorsFails) {
  const auto dir = testing::scratch_dir();
  save_checkpoint(dir / "m.ckpt", Checkpoint{init_params(testing::tiny_config(), 1), {}});
  TensorArchive data;
  data.kind = "data";
  data.meta["target_class"] = "0";
  write_file(dir / "d.archive", encode_archive(data));
  const auto r = cli({"analyze", "derive", "--checkpoint", (dir / "m.ckpt").string(), "--data",
                      (dir / "d.archive").string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitError);
  EXPECT_NE(r.err.find("pairs.clean"), std::string::npos) << r.err;
}

// Head rows are basis vectors; the patch embedding writes strongly along
// class 0 and weakly elsewhere.
ModelParams outlier_model(bool outlier) {
  const auto c = testing::tiny_config();
  ModelParams p = init_params(c, 1);
  for (auto& nt : p.named_tensors()) {
    for (auto& x : nt.tensor.mutable_data()) x = 0.0;
  }
  if (!outlier) return p;
  auto head = p.head_weight.mutable_data();
  for (std::size_t i = 0; i < c.n_classes; ++i) head[i * c.d_model + i] = 1.0;
  auto w = p.patch_weight.mutable_data();
  const std::size_t cols = c.patch_dim();
  for (std::size_t i = 0; i < c.d_model; ++i) {
    for (std::size_t j = 0; j < cols; ++j) w[i * cols + j] = i == 0 ? 1.0 : 0.01;
  }
  return p;
}

TEST(Cli, DetectExitCodeReflectsVerdict) {
  const auto dir = testing::scratch_dir();
  save_checkpoint(dir / "bad.ckpt", Checkpoint{outlier_model(true), {}});
  save_checkpoint(dir / "zero.ckpt", Checkpoint{outlier_model(false), {}});
  const auto bad = cli({"analyze", "detect", "--checkpoint", (dir / "bad.ckpt").string(),
                        "--out", (dir / "bad").string()});
  EXPECT_EQ(bad.code, kExitFlagged) << bad.err;
  const std::string summary = slurp(dir / "bad" / "detect_summary.csv");
  EXPECT_NE(summary.find("model,top_class,top_fraction,any_flag_rate,flagged"), std::string::npos);
  const auto zero = cli({"analyze", "detect", "--checkpoint", (dir / "zero.ckpt").string(),
                         "--out", (dir / "zero").string(), "--layers", "1-2",
                         "--thresholds", "0.1,0.5"});
  EXPECT_EQ(zero.code, kExitOk) << zero.err;
}

TEST(DetectVerdict, MostFlaggedClassNeedsMinimumShare) {
  ZGrid g;
  g.layers = {1};
  g.thresholds = {1, 2, 3, 4};
  g.cells = {{1, 1, 5, 2, true}, {1, 2, 5, 2, true}, {1, 3, 5, 1, true}, {1, 4, 0, 0, false}};
  const auto v = detect_verdict(g, 3, 0.5);
  ASSERT_TRUE(v.flagged.has_value());
  EXPECT_EQ(*v.flagged, 2);
  EXPECT_DOUBLE_EQ(v.top_fraction, 0.5);
  EXPECT_DOUBLE_EQ(v.any_rate, 0.75);
  EXPECT_FALSE(detect_verdict(g, 3, 0.6).flagged.has_value());
}

TEST(ParseRanges, LayersAndThresholds) {
  EXPECT_EQ(parse_layers("1-4"), (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(parse_layers("2"), (std::vector<std::size_t>{2}));
  EXPECT_EQ(parse_layers("1,3"), (std::vector<std::size_t>{1, 3}));
  EXPECT_THROW(parse_layers("4-1"), UsageError);
  EXPECT_THROW(parse_layers("a"), UsageError);
  EXPECT_THROW(parse_layers(""), UsageError);

  const auto t = parse_thresholds("0.02:2:20");
  EXPECT_EQ(t, geometric_thresholds(0.02, 2.0, 20));
  EXPECT_EQ(parse_thresholds("0.5,1"), (std::vector<double>{0.5, 1.0}));
  EXPECT_THROW(parse_thresholds("1:2"), UsageError);
  EXPECT_THROW(parse_thresholds("x"), UsageError);
}

TEST(Report, FixedFormatting) {
  EXPECT_EQ(fixed(0.5), "0.500000");
  EXPECT_EQ(fixed(2.0 / 3.0, 3), "0.667");
  EXPECT_EQ(fixed(-0.0, 2), "0.00");
  EXPECT_EQ(fixed(-1e-9, 3), "0.000");
  EXPECT_EQ(fixed(std::nan(""), 2), "nan");
  EXPECT_EQ(fixed(-12.25, 1), "-12.2");
}

TEST(Report, CsvTable) {
  CsvTable t({"a", "b"});
  t.row({"1", "2"}).row({"x", "y"});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.str(), "a,b\n1,2\nx,y\n");
  EXPECT_THROW(t.row({"only"}), std::invalid_argument);
}

TEST(Report, SvgChartsAreWellFormed) {
  const auto svg = line_chart_svg("t", "layer", {{"s", {0.1, 0.5, 0.9}}});
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  const auto heat = heatmap_svg("h", {"1"}, {"a", "b"}, {0.0, 5.0}, 3.0);
  EXPECT_NE(heat.find("</svg>"), std::string::npos);
}

}  // namespace
}  // namespace vitscope::cli
