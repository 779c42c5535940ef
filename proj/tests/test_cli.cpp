// Exit-code contract of the command line tool: 0 ok, 1 usage, 2 runtime.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "adapterlab/adapter.hpp"
#include "adapterlab/records.hpp"
#include "adapterlab/rng.hpp"
#include "support.hpp"

using namespace adapterlab;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(ADAPTERLAB_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string write_records(const std::string& dir) {
  Rng rng(3);
  const std::string path = dir + "/records.jsonl";
  std::ofstream out(path);
  for (const auto& d : enumerate_design_space({Activation::relu, Activation::identity}, {1.0, 2.0})) {
    RunRecord r;
    r.design = d.to_string();
    r.task = "personalization";
    r.steps = 2;
    r.checkpoints = {2};
    r.summary["similarity"] = 0.5 + 0.1 * rng.normal();
    r.metrics["similarity"] = {r.summary["similarity"]};
    out << r.to_json().dump() << '\n';
  }
  return path;
}

}  // namespace

TEST(Cli, HelpSucceeds) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("anova --help"), 0);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("pretrain --no-such-flag"), 1);
  EXPECT_EQ(run("--workers 0 pretrain"), 1);
  EXPECT_EQ(run("analyze"), 1);  // --in is required
  EXPECT_EQ(run("--set no.such_key=3 pretrain"), 1);
  EXPECT_EQ(run("--set steps pretrain"), 1);
  EXPECT_EQ(run("--config /nonexistent/file.toml pretrain"), 1);
}

TEST(Cli, BadConfigFileExitsOne) {
  const auto dir = testing_support::temp_dir("cli_config");
  std::ofstream(dir + "/bad.toml") << "[training]\nno_such_key = 4\n";
  EXPECT_EQ(run("--config " + dir + "/bad.toml --out " + dir + " pretrain"), 1);
}

TEST(Cli, RuntimeFailuresExitTwo) {
  const auto dir = testing_support::temp_dir("cli_runtime");
  EXPECT_EQ(run("--out " + dir + " anova --in " + dir + "/missing.jsonl"), 2);
  std::ofstream(dir + "/empty.jsonl").close();
  EXPECT_EQ(run("--out " + dir + " anova --in " + dir + "/empty.jsonl"), 2);
  EXPECT_EQ(run("--out " + dir + " sweep --fixture " + dir + "/no_fixture"), 2);
}

TEST(Cli, AnovaAndAnalyzeOnRecords) {
  const auto dir = testing_support::temp_dir("cli_records");
  const auto path = write_records(dir);
  EXPECT_EQ(run("--out " + dir + "/anova anova --in " + path), 0);
  EXPECT_TRUE(std::filesystem::exists(dir + "/anova/anova.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir + "/anova/anova.svg"));
  EXPECT_EQ(run("--out " + dir + "/report analyze --in " + path), 0);
  EXPECT_FALSE(std::filesystem::is_empty(dir + "/report"));
}
