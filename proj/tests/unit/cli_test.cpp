#include <filesystem>
#include <sstream>

#include <gmock/gmock.h>
#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "forkscope/cli.hpp"
#include "forkscope/report.hpp"

namespace forkscope {
namespace {

using ::testing::HasSubstr;
namespace fs = std::filesystem;

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  fs::path path(const std::string& name) const { return dir_.path() / name; }

  fs::path write(const std::string& name, const std::string& text) const {
    write_text_file(path(name), text);
    return path(name);
  }

  fs::path corpus(std::size_t n, bool rationales) const {
    return write("corpus.jsonl", format_corpus(testing::nsm_records(n, rationales)));
  }

  fs::path mock_file() const {
    const auto spec = testing::chain_spec({{"The", 0.55, {{" A", 0.45, 1.0}}},
                                           {" values", 0.8, {{" figures", 0.2, 0.0}}}});
    return write("mock.json", spec.to_json().dump());
  }

  testing::TempDir dir_;
};

TEST_F(CliTest, EvaluatePrintsMetrics) {
  const auto gold = corpus(4, false);  // yes, no, yes, no
  const auto pred = write("pred.jsonl",
                          "{\"id\":\"r01\",\"response\":\"<answer>yes</answer>\"}\n"
                          "{\"id\":\"r02\",\"prediction\":\"yes\"}\n"
                          "{\"id\":\"r03\",\"response\":\"unsure\"}\n"
                          "{\"id\":\"r04\",\"prediction\":\"no\"}\n");
  const auto r = run({"evaluate", "--pred", pred.string(), "--gold", gold.string(), "--out",
                      path("eval").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["records"], 4);
  EXPECT_EQ(j["unparseable"], 1);
  EXPECT_DOUBLE_EQ(j["metrics"]["accuracy"].get<double>(), 0.5);
  EXPECT_DOUBLE_EQ(j["metrics"]["precision"].get<double>(), 0.5);
  EXPECT_DOUBLE_EQ(j["metrics"]["recall"].get<double>(), 0.5);
  EXPECT_TRUE(fs::exists(path("eval") / "metrics.csv"));
  EXPECT_TRUE(fs::exists(path("eval") / "verdicts.csv"));
}

TEST_F(CliTest, EvaluateRejectsUnknownIds) {
  const auto gold = corpus(2, false);
  const auto pred = write("pred.jsonl", "{\"id\":\"zz\",\"prediction\":\"yes\"}\n");
  const auto r = run({"evaluate", "--pred", pred.string(), "--gold", gold.string(), "--out",
                      path("eval").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_THAT(r.err, HasSubstr("zz"));
}

TEST_F(CliTest, AlphaOutOfRangeIsAUsageError) {
  const auto r = run({"detect", "--responses", write("r.jsonl", "").string(), "--alpha", "1.5",
                      "--mock", mock_file().string(), "--out", path("d").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_THAT(r.err, HasSubstr("alpha"));
}

TEST_F(CliTest, UnknownSubcommandAndFlag) {
  auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_THAT(r.err, HasSubstr("Usage"));
  r = run({"stats", "--corpus", corpus(1, false).string(), "--bogus"});
  EXPECT_EQ(r.code, 1);
  r = run({});
  EXPECT_EQ(r.code, 1);
}

TEST_F(CliTest, VersionAndHelp) {
  auto r = run({"--version"});
  EXPECT_EQ(r.code, 0);
  EXPECT_THAT(r.out, HasSubstr(std::string(kVersion)));
  r = run({"detect", "--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_THAT(r.out, HasSubstr("--alpha"));
}

TEST_F(CliTest, UnreachableEndpointExitsWithBackendCode) {
  const int port = testing::unused_port();
  const auto r = run({"annotate", "--corpus", corpus(2, false).string(), "--exemplars",
                      write("ex.jsonl", format_corpus(testing::nsm_records(2, true))).string(),
                      "--base-url", "http://127.0.0.1:" + std::to_string(port), "--model", "m",
                      "--retries", "0", "--out", path("a").string()});
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_TRUE(fs::exists(path("a") / "rejects.jsonl"));
}

TEST_F(CliTest, MissingEndpointIsAUsageError) {
  ::unsetenv("FORKSCOPE_BASE_URL");
  const auto r = run({"generate", "--corpus", corpus(1, false).string(), "--out",
                      path("g").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_THAT(r.err, HasSubstr("--mock"));
}

TEST_F(CliTest, PipelineWritesManifestAndReport) {
  const auto mock = mock_file().string();
  auto r = run({"generate", "--corpus", corpus(3, false).string(), "--mock", mock, "--seed", "5",
                "--out", path("gen").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run({"detect", "--responses", (path("gen") / "responses.jsonl").string(), "--mock", mock,
           "--seed", "5", "--out", path("det").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_THAT(r.out, HasSubstr("3 responses analysed, 0 skipped"));
  r = run({"report", "--detections", (path("det") / "detections.jsonl").string(), "--format",
           "csv,svg", "--out", path("rep").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  // " A" always flips the answer, so "The" forks in every response.
  EXPECT_EQ(read_text_file(path("rep") / "frequencies.csv"), "token,count\nThe,3\n");

  const auto manifest = nlohmann::json::parse(read_text_file(path("det") / "manifest.json"));
  EXPECT_EQ(manifest["command"], "detect");
  EXPECT_EQ(manifest["exit_code"], 0);
  EXPECT_EQ(manifest["seed"], 5);
  std::vector<std::string> outputs = manifest["outputs"];
  EXPECT_THAT(outputs, ::testing::Contains(HasSubstr("detections.jsonl")));
}

TEST_F(CliTest, StatsHintAndCorrupt) {
  const auto c = corpus(8, true).string();
  auto r = run({"stats", "--corpus", c, "--out", path("s").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out)["record_count"], 8);

  r = run({"hint", "--corpus", c, "--out", path("h").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_THAT(read_text_file(path("h") / "hints.jsonl"), HasSubstr("# Hint"));

  r = run({"corrupt", "--corpus", c, "--fraction", "0.25", "--seed", "2", "--out",
           path("c").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto sel = nlohmann::json::parse(read_text_file(path("c") / "selected.json"));
  EXPECT_EQ(sel["selected_ids"].size(), 2u);
}

TEST_F(CliTest, MockOracle) {
  const auto r = run({"mock-oracle", "--mock", mock_file().string(), "--substitute", " A",
                      "--original-answer", "yes", "--out", path("o").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_DOUBLE_EQ(nlohmann::json::parse(r.out)["divergent_mass"].get<double>(), 1.0);
}

TEST_F(CliTest, ConfigFileRejectsUnknownKeys) {
  const auto cfg = write("cfg.json", R"({"rftd":{"alpha":0.4},"colour":"blue"})");
  const auto r = run({"--config", cfg.string(), "stats", "--corpus", corpus(1, false).string(),
                      "--out", path("s").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_THAT(r.err, HasSubstr("colour"));
}

}  // namespace
}  // namespace forkscope
