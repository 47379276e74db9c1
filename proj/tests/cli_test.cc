#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.h"

namespace fs = std::filesystem;
using mega::cli::run_command;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Cli, EmaEquivPassesAndWritesReport) {
  const fs::path dir = scratch("mega_cli_ema");
  const std::string report = (dir / "r.json").string();
  const Outcome r = run({"ema-equiv", "--n", "512", "--d", "8", "--h", "16", "--seed", "7", "--report", report});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  std::ifstream in(report);
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["command"], "ema-equiv");
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_LE(j["max_abs_gap"].get<double>(), 1e-10);
  fs::remove_all(dir);
}

TEST(Cli, FailedCheckExitsOne) {
  const Outcome t = run({"theorem1", "--trials", "5", "--heads", "2", "--tol", "-1"});
  EXPECT_EQ(t.code, 1);
  EXPECT_NE(t.out.find("FAIL"), std::string::npos);
}

TEST(Cli, Theorem1AndLaplace) {
  EXPECT_EQ(run({"theorem1", "--trials", "20", "--heads", "2,4"}).code, 0);
  const Outcome l = run({"laplace-check", "--points", "2000"});
  EXPECT_EQ(l.code, 0) << l.out << l.err;
}

TEST(Cli, GradcheckSingleFunction) {
  const Outcome r = run({"gradcheck", "--attn", "laplace"});
  EXPECT_EQ(r.code, 0) << r.out;
}

TEST(Cli, BenchWritesCsv) {
  const fs::path dir = scratch("mega_cli_bench");
  const std::string csv = (dir / "b.csv").string();
  const Outcome r = run({"bench", "--n", "64,128", "--chunk", "16", "--reps", "5", "--csv", csv});
  EXPECT_EQ(r.code, 0) << r.err;
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "n,c,mode,seconds,dtype");
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) rows += !line.empty();
  EXPECT_EQ(rows, 8u);
  fs::remove_all(dir);
}

TEST(Cli, UsageAndConfigErrorsExitTwo) {
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"ema-equiv", "--n", "abc"}).code, 2);
  EXPECT_EQ(run({"theorem1", "--heads", "3"}).code, 2);
  EXPECT_EQ(run({"bench", "--dtype", "f16"}).code, 2);
}

TEST(Cli, TrainWithMissingConfigLeavesNoOutputs) {
  const fs::path dir = scratch("mega_cli_missing");
  const fs::path before = fs::current_path();
  fs::current_path(dir);
  const Outcome r = run({"train", "--config", "missing.json", "--report", "report.json"});
  fs::current_path(before);
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(fs::is_empty(dir));
  fs::remove_all(dir);
}

TEST(Cli, TrainThenEval) {
  const fs::path dir = scratch("mega_cli_train");
  const std::string cfg = (dir / "c.json").string();
  {
    std::ofstream f(cfg);
    f << R"({"model": {"depth": 1, "d": 8, "h_ema": 4, "chunk": 4, "pool": "last"},
            "train": {"steps": 12, "batch": 4, "eval_every": 6, "eval_count": 16},
            "task": {"kind": "key_value_recall", "n": 7, "key_vocab": 4, "value_vocab": 4},
            "io": {"metrics": ")"
      << (dir / "m.csv").string() << R"(", "checkpoint": ")" << (dir / "w.ckpt").string() << R"("}})";
  }
  const Outcome t = run({"train", "--config", cfg, "--quiet"});
  EXPECT_EQ(t.code, 0) << t.err;
  EXPECT_TRUE(fs::exists(dir / "m.csv"));
  EXPECT_TRUE(fs::exists(dir / "w.ckpt"));
  const std::string report = (dir / "e.json").string();
  const Outcome e = run({"eval", "--checkpoint", (dir / "w.ckpt").string(), "--count", "50", "--report", report});
  EXPECT_EQ(e.code, 0) << e.err;
  std::ifstream in(report);
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["command"], "eval");
  EXPECT_EQ(j["count"].get<int>(), 50);
  const Outcome bad = run({"eval", "--checkpoint", (dir / "nope.ckpt").string()});
  EXPECT_EQ(bad.code, 1);
  fs::remove_all(dir);
}
