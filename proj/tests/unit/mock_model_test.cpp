#include <cmath>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "forkscope/error.hpp"
#include "forkscope/mock_model.hpp"

namespace forkscope {
namespace {

using testing::SpecBuilder;

MockSpec two_way() {
  return SpecBuilder().row({}, {{"B", 0.7}, {"C", 0.3}}).terminal("B").terminal("C").build();
}

TEST(MockModel, PointMassGreedy) {
  MockModel m(SpecBuilder().row({}, {{"B", 1.0}}).terminal("B").build());
  const auto c = m.complete({"", {}}, DecodeParams{0.0, 8, 5, 0});
  EXPECT_EQ(c.text, "B");
  EXPECT_EQ(c.finish_reason, "stop");
}

TEST(MockModel, GreedyTakesArgmax) {
  MockModel m(two_way());
  EXPECT_EQ(m.complete({"", {}}, DecodeParams{0.0, 8, 5, 0}).text, "B");
}

TEST(MockModel, GreedyTieBreaksLexicographically) {
  MockModel m(SpecBuilder().row({}, {{"y", 0.5}, {"x", 0.5}}).terminal("x").terminal("y").build());
  EXPECT_EQ(m.complete({"", {}}, DecodeParams{0.0, 8, 5, 0}).text, "x");
}

TEST(MockModel, SeededSamplingIsReproducible) {
  const auto spec = testing::chain_spec({{"The", 0.5, {{" A", 0.3, 0.5}, {" B", 0.2, 0.5}}},
                                         {" value", 0.6, {{" sum", 0.4, 0.3}}}});
  MockModel m(spec);
  const DecodeParams p{0.7, 16, 5, 42};
  const auto a = m.complete({"prompt", {}}, p);
  const auto b = m.complete({"prompt", {}}, p);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
}

TEST(MockModel, PromptOnlyChangesTheSeed) {
  MockModel m(two_way());
  EXPECT_EQ(m.complete({"one", {}}, DecodeParams{0.0, 8, 5, 0}).text,
            m.complete({"two", {}}, DecodeParams{0.0, 8, 5, 0}).text);
}

TEST(MockModel, ScoresWithTableLogarithms) {
  MockModel m(two_way());
  const auto lps = m.score("", "C");
  ASSERT_EQ(lps.size(), 1u);
  EXPECT_NEAR(lps[0], -1.203973, 1e-6);
  EXPECT_TRUE(m.score("", "").empty());
}

TEST(MockModel, ScoringGreedyOutputMatchesStepLogprobs) {
  const auto spec = testing::chain_spec({{"The", 0.6, {{" A", 0.4, 1.0}}},
                                         {" value", 0.9, {{" sum", 0.1, 0.0}}}});
  MockModel m(spec);
  const auto c = m.complete({"", {}}, DecodeParams{0.0, 16, 5, 0});
  const auto lps = m.score("", c.text);
  ASSERT_EQ(lps.size(), c.steps.size());
  for (std::size_t i = 0; i < lps.size(); ++i) EXPECT_DOUBLE_EQ(lps[i], c.steps[i].logprob);
  EXPECT_NEAR(lps[0], std::log(0.6), 1e-12);
  EXPECT_NEAR(lps[1], std::log(0.9), 1e-12);
}

TEST(MockModel, PrefixEndingInTerminalYieldsEmptyCompletion) {
  MockModel m(two_way());
  const auto c = m.complete({"", {"B"}}, DecodeParams{0.7, 8, 5, 1});
  EXPECT_TRUE(c.steps.empty());
  EXPECT_EQ(c.finish_reason, "stop");
}

TEST(MockModel, LengthFinishAndTruncatedCandidates) {
  SpecBuilder b;
  b.row({}, {{"a", 0.4}, {"b", 0.3}, {"c", 0.2}, {"d", 0.1}});
  b.default_row({{"a", 0.4}, {"b", 0.3}, {"c", 0.2}, {"d", 0.1}});
  MockModel m(b.build());
  const auto c = m.complete({"", {}}, DecodeParams{0.0, 3, 2, 0});
  EXPECT_EQ(c.steps.size(), 3u);
  EXPECT_EQ(c.finish_reason, "length");
  for (const auto& s : c.steps) {
    ASSERT_EQ(s.candidates.size(), 2u);
    EXPECT_NEAR(s.coverage, 0.7, 1e-12);
  }
}

TEST(MockModel, StepsAreSortedAndCoverageBounded) {
  std::mt19937_64 rng(5);
  for (int round = 0; round < 30; ++round) {
    SpecBuilder b;
    const std::vector<std::string> toks = {"a", "b", "c", "d", "e"};
    std::vector<std::pair<std::string, double>> row;
    double total = 0.0;
    std::vector<double> w;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      w.push_back(1.0 + static_cast<double>(rng() % 5));
      total += w.back();
    }
    for (std::size_t i = 0; i < toks.size(); ++i) row.emplace_back(toks[i], w[i] / total);
    b.default_row(row);
    b.terminal("e");
    MockModel m(b.build());
    const auto c = m.complete({"", {}}, DecodeParams{0.9, 12, 4, rng()});
    for (const auto& s : c.steps) {
      EXPECT_LE(s.coverage, 1.0 + 1e-6);
      for (std::size_t i = 1; i < s.candidates.size(); ++i) {
        const auto& prev = s.candidates[i - 1];
        const auto& cur = s.candidates[i];
        EXPECT_TRUE(prev.probability > cur.probability ||
                    (prev.probability == cur.probability && prev.token < cur.token));
      }
    }
  }
}

TEST(MockSpec, BacksOffToShorterContextsAndDefault) {
  SpecBuilder b;
  b.row({}, {{"a", 1.0}});
  b.row({"a"}, {{"b", 1.0}});
  b.row({"x", "b"}, {{"z", 1.0}});
  b.default_row({{"<eos>", 1.0}});
  b.terminal("<eos>");
  const auto spec = b.build();
  const std::vector<std::string> h1{"a"};
  EXPECT_EQ(spec.row(h1).front().token, "b");
  const std::vector<std::string> h2{"q", "a"};  // falls back to the one-token key
  EXPECT_EQ(spec.row(h2).front().token, "b");
  const std::vector<std::string> h3{"a", "b"};
  EXPECT_EQ(spec.row(h3).front().token, "<eos>");
}

TEST(MockSpec, RejectsBadTables) {
  EXPECT_THROW(SpecBuilder().row({}, {{"a", 0.5}, {"b", 0.4}}).terminal("a").terminal("b").build(),
               ValidationError);
  EXPECT_THROW(SpecBuilder().row({}, {{"a|b", 1.0}}).terminal("a|b").build(), ValidationError);
  // "a" is reachable but has no row and there is no default.
  EXPECT_THROW(SpecBuilder().row({}, {{"a", 1.0}}).build(), ValidationError);
  EXPECT_THROW(
      SpecBuilder(1).row({}, {{"a", 1.0}}).row({"a", "a"}, {{"a", 1.0}}).terminal("a").build(),
      ValidationError);
}

TEST(MockSpec, JsonRoundTrip) {
  const auto spec = testing::chain_spec({{"The", 0.5, {{" A", 0.3, 0.5}, {" B", 0.2, -1}}}});
  const auto back = MockSpec::from_json(nlohmann::json::parse(spec.to_json().dump()));
  EXPECT_EQ(back.to_json().dump(), spec.to_json().dump());
  EXPECT_EQ(back.terminals, spec.terminals);
}

TEST(MockModel, TemperedSamplingMatchesTemperedTable) {
  MockModel m(two_way());
  const double t = 0.7;
  const double expected = testing::tempered_two_way(0.3, t);
  const int draws = 10000;
  int c_count = 0;
  for (int i = 0; i < draws; ++i) {
    const auto c = m.complete({"", {}}, DecodeParams{t, 1, 5, static_cast<std::uint64_t>(i)});
    if (c.text == "C") ++c_count;
  }
  const double sigma = std::sqrt(draws * expected * (1 - expected));
  EXPECT_NEAR(c_count, draws * expected, 3 * sigma);
}

}  // namespace
}  // namespace forkscope
