#include <gtest/gtest.h>

#include <fstream>

#include "model_util.hpp"
#include "vsur/cli.hpp"

using namespace vsur;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST(Cli, GenerateWritesCorpus) {
  test::TempDir dir;
  const auto r = cli({"generate", "--members", "4", "--views", "2", "--colormaps", "2", "--out",
                      (dir / "db").string(), "--seed", "3"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto m = open_manifest(dir / "db");
  EXPECT_EQ(m.records.size(), 16u);
  EXPECT_EQ(m.seed, 3u);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(cli({}).code, kExitValidation);
  EXPECT_EQ(cli({"generate", "--out", "/tmp/x", "--bogus"}).code, kExitValidation);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitValidation);
}

TEST(Cli, InferOutOfRangeNamesParameter) {
  test::TempDir dir;
  const auto ckpt = test::tiny_checkpoint(dir / "a.ckpt");
  const auto r = cli({"infer", "--checkpoint", ckpt.string(), "--params",
                      R"({"sim_values": [0.2, 2.0], "vis_choices": [0], "view": {"azimuth": 0, "elevation": 0}})",
                      "--out", (dir / "o.png").string()});
  EXPECT_EQ(r.code, kExitValidation);
  EXPECT_NE(r.err.find("a"), std::string::npos);
  EXPECT_FALSE(std::filesystem::exists(dir / "o.png"));
}

TEST(Cli, InferWritesPng) {
  test::TempDir dir;
  const auto ckpt = test::tiny_checkpoint(dir / "a.ckpt");
  const auto r = cli({"infer", "--checkpoint", ckpt.string(), "--params",
                      R"({"sim_values": [0.7, 2.0], "vis_choices": [1], "view": {"azimuth": 10, "elevation": 5}})",
                      "--out", (dir / "o.png").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(read_png((dir / "o.png").string()).width, 16);
}

TEST(Cli, MissingCheckpointIsRuntimeError) {
  test::TempDir dir;
  const auto r = cli({"infer", "--checkpoint", (dir / "none.ckpt").string(), "--params",
                      R"({"sim_values": [0.7, 2.0]})", "--out", (dir / "o.png").string()});
  EXPECT_EQ(r.code, kExitRuntime);
}

TEST(Cli, TrainEvaluateSensitivitySmoke) {
  test::TempDir dir;
  test::toy_corpus(dir / "db", 4, 2, 16);
  auto r = cli({"train", "--data", (dir / "db").string(), "--out", (dir / "m.ckpt").string(), "--k", "4",
                "--iterations", "3", "--batch", "4", "--loss", "feat+adv", "--log", (dir / "log.jsonl").string(),
                "--deterministic"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(load_checkpoint(dir / "m.ckpt").meta.iteration, 3);

  r = cli({"evaluate", "--checkpoint", (dir / "m.ckpt").string(), "--data", (dir / "db").string(), "--out",
           (dir / "rep.json").string(), "--contact-sheet", (dir / "sheet.png").string()});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::ifstream in(dir / "rep.json");
  const auto rep = nlohmann::json::parse(in);
  EXPECT_TRUE(rep.contains("model"));
  EXPECT_TRUE(rep.contains("baseline"));
  EXPECT_EQ(rep["model"]["n_images"], 4);
  EXPECT_EQ(read_png((dir / "sheet.png").string()).width, 48);

  r = cli({"sensitivity", "--checkpoint", (dir / "m.ckpt").string(), "--params",
           R"({"sim_values": [0.5, 0.5], "vis_choices": [0], "view": {"azimuth": 0, "elevation": 0}})",
           "--param", "p1", "--subregion", "--block", "8"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto map = nlohmann::json::parse(r.out);
  EXPECT_EQ(map["rows"], 2);
}

TEST(Cli, TrainRejectsUnknownLoss) {
  test::TempDir dir;
  test::toy_corpus(dir / "db", 2, 1, 16);
  const auto r = cli({"train", "--data", (dir / "db").string(), "--out", (dir / "m.ckpt").string(), "--loss",
                      "l1"});
  EXPECT_EQ(r.code, kExitValidation);
}
