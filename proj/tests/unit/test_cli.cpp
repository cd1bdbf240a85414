#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome cli(std::vector<std::string> args) {
  args.insert(args.begin(), "keycache");
  std::ostringstream out, err;
  const int code = keycache::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(cell);
    if (!line.empty() && line.back() == ',') row.push_back("");
    rows.push_back(row);
  }
  return rows;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[e.path().string()] = slurp(e.path());
  }
  return files;
}

// Small end-to-end pipeline shared by every test in the suite.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("keycache_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    ok({"gen-data", "--out", p("data"), "--classes", "3", "--train-per-class", "20",
        "--val-per-class", "10", "--test-per-class", "10", "--seed", "4"});
    data_snapshot_ = snapshot(root_ / "data");
    ok({"train", "--data", p("data"), "--out", p("model"), "--hidden", "16,8", "--epochs", "5"});
    ok({"extract", "--data", p("data"), "--model", p("model"), "--out", p("features")});
    ok({"build-cache", "--features", p("features"), "--layers", "hidden2", "--out", p("cache")});
    ok({"tune", "--features", p("features"), "--cache", p("cache"), "--out", p("tune")});
    ok({"eval", "--features", p("features"), "--cache", p("cache"), "--tuned", p("tune/best.json"),
        "--out", p("eval")});
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static std::string p(const std::string& name) { return (root_ / name).string(); }
  static void ok(const std::vector<std::string>& args) {
    const auto r = cli(args);
    ASSERT_EQ(r.code, 0) << args[0] << ": " << r.err;
  }

  static inline fs::path root_;
  static inline std::map<std::string, std::string> data_snapshot_;
};

}  // namespace

TEST_F(Pipeline, EvalWritesThreeRowTable) {
  const auto rows = csv_rows(root_ / "eval" / "eval.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0][0], "model");
  EXPECT_EQ(rows[1][0], "baseline");
  EXPECT_EQ(rows[2][0], "cache");
  EXPECT_EQ(rows[3][0], "cache_only");
  EXPECT_EQ(rows[3][3], "1");  // cache_only lambda
  for (const char* f : {"config.json", "outputs.json"}) {
    EXPECT_TRUE(fs::exists(root_ / "eval" / f)) << f;
  }
}

TEST_F(Pipeline, EveryStageEchoesItsConfig) {
  for (const char* dir : {"data", "model", "features", "cache", "tune", "eval"}) {
    EXPECT_TRUE(fs::exists(root_ / dir / "config.json")) << dir;
  }
  EXPECT_TRUE(fs::exists(root_ / "tune" / "best.json"));
}

TEST_F(Pipeline, LambdaZeroMatchesBareNetwork) {
  ok({"eval", "--features", p("features"), "--out", p("eval_bare")});
  ok({"eval", "--features", p("features"), "--cache", p("cache"), "--theta", "50", "--lambda", "0",
      "--out", p("eval_l0")});
  const auto bare = csv_rows(root_ / "eval_bare" / "eval.csv");
  const auto l0 = csv_rows(root_ / "eval_l0" / "eval.csv");
  ASSERT_EQ(bare.size(), 2u);
  ASSERT_EQ(l0.size(), 4u);
  EXPECT_EQ(l0[2][0], "cache");
  EXPECT_EQ(l0[2][3], "0");
  // val and test accuracy, as written
  EXPECT_EQ(l0[2][4], bare[1][4]);
  EXPECT_EQ(l0[2][5], bare[1][5]);
}

TEST_F(Pipeline, ConfigEchoReproducesOutputs) {
  ok({"eval", "--config", p("eval/config.json"), "--out", p("eval_again")});
  EXPECT_EQ(slurp(root_ / "eval" / "eval.csv"), slurp(root_ / "eval_again" / "eval.csv"));
  ok({"gen-data", "--config", p("data/config.json"), "--out", p("data_again")});
  for (const char* f : {"manifest.json", "train.input.ftr", "test.lbl"}) {
    EXPECT_EQ(slurp(root_ / "data" / f), slurp(root_ / "data_again" / f)) << f;
  }
}

TEST_F(Pipeline, CommandLineOverridesConfig) {
  ok({"eval", "--config", p("eval/config.json"), "--lambda", "0", "--out", p("eval_override")});
  const auto rows = csv_rows(root_ / "eval_override" / "eval.csv");
  EXPECT_EQ(rows[2][3], "0");
}

TEST_F(Pipeline, AttackJacobianAndReport) {
  ok({"attack", "--data", p("data"), "--model", p("model"), "--cache", p("cache"), "--tuned",
      p("tune/best.json"), "--attacks", "fgsm,sp", "--samples", "6", "--steps", "20",
      "--save-adversarials", "--allow-empty", "--out", p("transfer")});
  const auto rows = csv_rows(root_ / "transfer" / "attacks.csv");
  ASSERT_EQ(rows.size(), 7u);  // 2 attacks x 3 evaluated models
  EXPECT_EQ(rows[0][0], "attack");
  EXPECT_TRUE(fs::exists(root_ / "transfer" / "attacks.jsonl"));

  ok({"attack", "--data", p("data"), "--model", p("model"), "--cache", p("cache"), "--mode",
      "whitebox", "--attacks", "fgsm", "--samples", "6", "--steps", "20", "--out", p("whitebox")});
  EXPECT_EQ(csv_rows(root_ / "whitebox" / "attacks.csv").size(), 4u);

  ok({"jacobian", "--data", p("data"), "--model", p("model"), "--cache", p("cache"), "--points",
      "4", "--out", p("jacobian")});
  EXPECT_TRUE(fs::exists(root_ / "jacobian" / "jacobian_norms.csv"));

  ok({"report", "--inputs", p("eval"), p("transfer"), p("whitebox"), p("jacobian"), p("tune"),
      "--out", p("report")});
  const std::string report = slurp(root_ / "report" / "report.csv");
  for (const char* section : {"accuracy,", "transfer,", "whitebox,", "jacobian,", "tune_grid"}) {
    EXPECT_NE(report.find(section), std::string::npos) << section;
  }
  EXPECT_TRUE(fs::exists(root_ / "report" / "report.md"));
}

TEST_F(Pipeline, SweepModes) {
  ok({"tune", "--features", p("features"), "--mode", "layers", "--out", p("sweep_layers")});
  EXPECT_EQ(csv_rows(root_ / "sweep_layers" / "layers.csv").size(), 6u);  // header, 5 taps
  ok({"tune", "--features", p("features"), "--mode", "size", "--fractions", "0,0.5,1", "--runs",
      "1", "--out", p("sweep_size")});
  EXPECT_EQ(csv_rows(root_ / "sweep_size" / "size.csv").size(), 4u);
  ok({"tune", "--features", p("features"), "--mode", "multi", "--layers", "hidden1,hidden2",
      "--out", p("sweep_multi")});
  EXPECT_TRUE(fs::exists(root_ / "sweep_multi" / "best.json"));
}

TEST_F(Pipeline, InputsAreNotModified) {
  EXPECT_EQ(snapshot(root_ / "data"), data_snapshot_);
}

TEST_F(Pipeline, RuntimeFailureLeavesNoOutput) {
  const auto r = cli({"build-cache", "--features", p("features"), "--layers", "conv9", "--out",
                      p("bad_cache")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("UnknownLayer"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(root_ / "bad_cache"));
  EXPECT_FALSE(fs::exists(root_ / ".bad_cache.partial"));
}

TEST_F(Pipeline, OutputMayNotOverlapInput) {
  const auto r = cli({"eval", "--features", p("features"), "--out", p("features")});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(cli({"eval", "--features", p("features"), "--out", p("features/sub")}).code, 2);
}

TEST_F(Pipeline, BadConfigIsUsageError) {
  const fs::path cfg = root_ / "bad.json";
  std::ofstream(cfg) << R"({"no_such_flag": 3})";
  EXPECT_EQ(cli({"eval", "--config", cfg.string(), "--features", p("features"), "--out",
                 p("x")}).code, 2);
  std::ofstream(cfg) << R"({"command": "train"})";
  EXPECT_EQ(cli({"eval", "--config", cfg.string(), "--features", p("features"), "--out",
                 p("x")}).code, 2);
  EXPECT_FALSE(fs::exists(root_ / "x"));
}

TEST(Cli, UnknownFlagIsUsageError) {
  const auto r = cli({"eval", "--features", ".", "--out", "unused", "--bogus", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--bogus"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(Cli, MissingSubcommandAndBadValues) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
  EXPECT_EQ(cli({"tune", "--features", ".", "--out", "x", "--mode", "random"}).code, 2);
  EXPECT_EQ(cli({"eval", "--features", "/definitely/not/here", "--out", "x"}).code, 2);
}

TEST(Cli, HelpExitsZero) {
  const auto r = cli({"attack", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("--save-adversarials"), std::string::npos);
}
