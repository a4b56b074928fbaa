#include <filesystem>

#include <gmock/gmock.h>
#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "forkscope/error.hpp"
#include "forkscope/report.hpp"

namespace forkscope {
namespace {

using ::testing::HasSubstr;

DetectionResult result_with(std::string id, const std::vector<std::string>& tokens,
                            std::string hash = "h1") {
  DetectionResult r;
  r.id = std::move(id);
  r.config_hash = std::move(hash);
  r.endpoint = "mock";
  std::size_t pos = 0;
  for (const auto& t : tokens) r.forking.push_back({++pos, t, 0.5});
  return r;
}

FrequencyTable sample_table() {
  return aggregate_frequencies(
      {result_with("a", {"different"}), result_with("b", {"different", "but"})});
}

TEST(Aggregate, CountsForkingTokens) {
  const auto t = sample_table();
  ASSERT_EQ(t.counts.size(), 2u);
  EXPECT_EQ(t.counts[0], (std::pair<std::string, std::size_t>{"different", 2}));
  EXPECT_EQ(t.counts[1], (std::pair<std::string, std::size_t>{"but", 1}));
  EXPECT_EQ(t.total, 3u);
  EXPECT_EQ(t.config_hash, "h1");
  EXPECT_EQ(t.endpoint, "mock");
}

TEST(Aggregate, TiesAreLexicographicAndTokensVerbatim) {
  const auto t = aggregate_frequencies({result_with("a", {" so", "But", " so", "but"})});
  ASSERT_EQ(t.counts.size(), 3u);
  EXPECT_EQ(t.counts[0].first, " so");
  EXPECT_EQ(t.counts[1].first, "But");
  EXPECT_EQ(t.counts[2].first, "but");
}

TEST(Aggregate, RefusesMixedConfigurations) {
  try {
    aggregate_frequencies({result_with("a", {"x"}, "h1"), result_with("b", {"y"}, "h2")});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_THAT(e.what(), HasSubstr("'b'"));
  }
}

TEST(Aggregate, EmptyInput) {
  const auto t = aggregate_frequencies({});
  EXPECT_TRUE(t.counts.empty());
  EXPECT_EQ(t.total, 0u);
  EXPECT_EQ(frequency_csv(t), "token,count\n");
  EXPECT_THAT(frequency_svg(t, 5), HasSubstr("no forking tokens"));
}

TEST(Report, CsvLayout) {
  EXPECT_EQ(frequency_csv(sample_table()), "token,count\ndifferent,2\nbut,1\n");
  const auto q = aggregate_frequencies({result_with("a", {"a,b", "say \"hi\""})});
  EXPECT_EQ(frequency_csv(q), "token,count\n\"a,b\",1\n\"say \"\"hi\"\"\",1\n");
}

TEST(Report, JsonCarriesProvenance) {
  auto t = sample_table();
  t.corpus_id = "nsm-dev";
  const auto j = nlohmann::json::parse(frequency_json(t));
  EXPECT_EQ(j["total"], 3);
  EXPECT_EQ(j["corpus_id"], "nsm-dev");
  EXPECT_EQ(j["config_hash"], "h1");
  EXPECT_EQ(j["tokens"][0]["token"], "different");
}

TEST(Report, SvgIsDeterministicAndHonoursTopN) {
  const auto t = sample_table();
  EXPECT_EQ(frequency_svg(t, 20), frequency_svg(sample_table(), 20));
  const auto one = frequency_svg(t, 1);
  EXPECT_THAT(one, HasSubstr(">different<"));
  EXPECT_THAT(one, ::testing::Not(HasSubstr(">but<")));
  std::size_t rects = 0;
  for (auto at = one.find("<rect"); at != std::string::npos; at = one.find("<rect", at + 1)) ++rects;
  EXPECT_EQ(rects, 1u);
  EXPECT_THROW(frequency_svg(t, 0), ValidationError);
}

TEST(Report, SvgEscapesMarkup) {
  const auto t = aggregate_frequencies({result_with("a", {"<&>"})});
  EXPECT_THAT(frequency_svg(t, 3), HasSubstr("&lt;&amp;&gt;"));
}

TEST(Report, EmitsRequestedFormats) {
  testing::TempDir dir;
  const auto written = emit_report(sample_table(), {ReportFormat::csv, ReportFormat::svg}, 20,
                                   dir.path() / "out");
  ASSERT_EQ(written.size(), 2u);
  for (const auto& p : written) EXPECT_TRUE(std::filesystem::exists(p));
  EXPECT_FALSE(std::filesystem::exists(dir.path() / "out" / "frequencies.json"));
  EXPECT_THROW(parse_report_format("pdf"), ValidationError);
}

TEST(Manifest, RecordsRunFacts) {
  testing::TempDir dir;
  RunManifest m;
  m.command = "detect";
  m.argv = {"forkscope", "detect"};
  m.config = {{"alpha", 0.5}};
  m.seed = 9;
  m.started_at = m.finished_at = std::chrono::system_clock::time_point{};
  m.outputs = {dir.path() / "detections.jsonl"};
  m.exit_code = 0;
  const auto path = dir.path() / "manifest.json";
  m.write(path);
  const auto j = nlohmann::json::parse(read_text_file(path));
  EXPECT_EQ(j["command"], "detect");
  EXPECT_EQ(j["seed"], 9);
  EXPECT_EQ(j["started_at"], "1970-01-01T00:00:00Z");
  EXPECT_EQ(j["outputs"][0], (dir.path() / "detections.jsonl").string());
  EXPECT_EQ(j["config"]["alpha"], 0.5);
}

}  // namespace
}  // namespace forkscope
