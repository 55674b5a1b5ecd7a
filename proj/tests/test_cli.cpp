#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out;  // stdout and stderr together
};

CliRun cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(MUSLCAT_CLI) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, ""};
  std::string out;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

bool has(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("muslcat_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli("").code, 1);
  EXPECT_EQ(cli("train").code, 1);
  const CliRun r = cli("evaluate a.ckpt m.jsonl --frobnicate");
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.out, "frobnicate")) << r.out;
  EXPECT_EQ(cli("--help").code, 0);
  EXPECT_EQ(cli("gradcheck", "MUSLCAT_THREADS=lots").code, 1);
}

TEST(Cli, MissingInputsNameThePath) {
  const fs::path dir = fresh_dir("missing");
  CliRun r = cli("train " + (dir / "nope.json").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.out, "nope.json")) << r.out;

  std::ofstream(dir / "model.json") << muslcat::testing::tiny_model_json("pool", 2).dump();
  std::ofstream(dir / "train.json") << R"({"model": "model.json", "manifest": "absent/manifest.jsonl"})";
  r = cli("train " + (dir / "train.json").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.out, "absent/manifest.jsonl")) << r.out;

  std::ofstream(dir / "bad.ckpt") << "not a checkpoint";
  r = cli("evaluate " + (dir / "bad.ckpt").string() + " " + (dir / "m.jsonl").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.out, "bad.ckpt")) << r.out;
  fs::remove_all(dir);
}

TEST(Cli, GradcheckSuite) {
  CliRun r = cli("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(has(r.out, "39/39 checks passed")) << r.out;
  EXPECT_FALSE(has(r.out, "FAIL"));
  r = cli("gradcheck --module relu");
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(has(r.out, "3/3 checks passed")) << r.out;
  r = cli("gradcheck --module nosuchlayer");
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.out, "conv1d")) << r.out;
  EXPECT_TRUE(has(cli("gradcheck --list").out, "mha_relative"));
}

TEST(Cli, AuditReferenceMuslcan) {
  const CliRun r = cli("audit " + std::string(MUSLCAT_SOURCE_DIR) + "/configs/reference/muslcan.json --json");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(r.out);
  const double total = j["total"].get<double>();
  EXPECT_NEAR(total, 3.38e6, 0.15 * 3.38e6);
}

TEST(Cli, SynthTrainEvaluateRoundTrip) {
  const fs::path dir = fresh_dir("e2e");
  CliRun r = cli("synth-data --out " + (dir / "data").string() + " --tags 7");
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(has(r.out, "Nyquist")) << r.out;

  r = cli("--seed 3 synth-data --out " + (dir / "data").string() + " --songs 60 --tags 2 --seconds 0.3");
  ASSERT_EQ(r.code, 0) << r.out;
  std::ofstream(dir / "model.json") << muslcat::testing::tiny_model_json("pool", 2).dump();
  std::ofstream(dir / "train.json") << R"({"model": "model.json", "manifest": "data/manifest.jsonl",
                                           "out_dir": "run", "batch_size": 8, "epochs": 1})";
  r = cli("--seed 4 train " + (dir / "train.json").string() + " --out " + (dir / "run").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(dir / "run" / "best.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "run" / "trace.csv"));
  const auto run = nlohmann::json::parse(std::ifstream(dir / "run" / "run.json"));
  EXPECT_EQ(run["config"]["seed"], 4);
  EXPECT_EQ(run["stop_reason"], "max_epochs");

  r = cli("evaluate " + (dir / "run" / "best.ckpt").string() + " " + (dir / "data" / "manifest.jsonl").string() +
          " --split all --json " + (dir / "report.json").string() + " --csv " + (dir / "report.csv").string());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(has(r.out, "macro ROC-AUC")) << r.out;
  const auto rep = nlohmann::json::parse(std::ifstream(dir / "report.json"));
  EXPECT_EQ(rep["songs"], 60);
  EXPECT_EQ(rep["tags"].size(), 2u);
  const double auc = rep["macro_roc_auc"].get<double>();
  EXPECT_GE(auc, 0.0);
  EXPECT_LE(auc, 1.0);

  r = cli("evaluate " + (dir / "run" / "best.ckpt").string() + " " + (dir / "data" / "manifest.jsonl").string() +
          " --split dev");
  EXPECT_EQ(r.code, 1);
  fs::remove_all(dir);
}
