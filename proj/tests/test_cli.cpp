#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "opt/config.hpp"
#include "tiny_config.hpp"

namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run(const std::string& args) {
  const std::string cmd = std::string(OPT_CLI_PATH) + " " + args + " 2>/dev/null";
  Outcome r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p) != nullptr) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "opt_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "tiny.ini") << opt::write_config(opt::fixtures::tiny_config(3));
    trained_ = run("train --quiet --config " + (dir_ / "tiny.ini").string() + " --out " + (dir_ / "run").string());
  }
  static fs::path dir_;
  static Outcome trained_;
};

fs::path Cli::dir_;
Outcome Cli::trained_;

}  // namespace

TEST_F(Cli, TrainWritesRunDirectory) {
  ASSERT_EQ(trained_.code, 0);
  EXPECT_TRUE(fs::exists(dir_ / "run" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir_ / "run" / "config.ini"));
  EXPECT_TRUE(fs::exists(dir_ / "run" / "checkpoint.bin"));
}

TEST_F(Cli, EvalPrintsJson) {
  const Outcome r = run("eval --checkpoint " + (dir_ / "run" / "checkpoint.bin").string() +
                        " --split unseen_scale --episodes 5 --seed 9");
  ASSERT_EQ(r.code, 0);
  const nlohmann::json j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["split"], "unseen_scale");
  EXPECT_EQ(j["episodes"], 5);
  EXPECT_GE(j["win_rate"].get<double>(), 0.0);
  EXPECT_LE(j["win_rate"].get<double>(), 1.0);
  EXPECT_TRUE(j.contains("mean_return"));
  EXPECT_EQ(run("eval --checkpoint " + (dir_ / "run" / "checkpoint.bin").string() +
                " --split unseen_scale --episodes 5 --seed 9").out,
            r.out);
}

TEST_F(Cli, DumpWritesJson) {
  const fs::path out = dir_ / "dump.json";
  ASSERT_EQ(run("dump-prototypes --checkpoint " + (dir_ / "run" / "checkpoint.bin").string() + " --episodes 1 --out " +
                out.string())
                .code,
            0);
  std::ifstream in(out);
  const nlohmann::json j = nlohmann::json::parse(in);
  EXPECT_EQ(j["episodes"].size(), 1u);
}

TEST_F(Cli, UsageAndConfigErrorsExitWithOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("train --config " + (dir_ / "missing.ini").string()).code, 1);
  std::ofstream(dir_ / "bad.ini") << "[model]\nwidth = 3\n";
  EXPECT_EQ(run("train --config " + (dir_ / "bad.ini").string()).code, 1);
  EXPECT_EQ(run("ablate --variant no-gru --config " + (dir_ / "tiny.ini").string()).code, 1);
  EXPECT_EQ(run("eval --checkpoint " + (dir_ / "run" / "checkpoint.bin").string() + " --episodes 0").code, 1);
  EXPECT_EQ(run("eval --checkpoint " + (dir_ / "run" / "checkpoint.bin").string() + " --split nowhere").code, 1);
  EXPECT_EQ(run("check --suite bogus").code, 1);
}

TEST_F(Cli, RuntimeFailuresExitWithTwo) {
  std::ofstream(dir_ / "junk.bin") << "not a checkpoint";
  EXPECT_EQ(run("eval --checkpoint " + (dir_ / "junk.bin").string()).code, 2);
  EXPECT_EQ(run("eval --checkpoint " + (dir_ / "absent.bin").string()).code, 2);
}

TEST_F(Cli, PassingSuiteExitsWithZero) {
  const Outcome r = run("check --suite sparsemax");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}
