#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "forkscope/gateway.hpp"

namespace forkscope {

// A finite-context language model defined by a transition table. The context
// is the last `window` response tokens; lookup backs off to shorter suffixes,
// then to the start row "" (empty history only), then to the default row "*".
//
// JSON form:
//   {"vocab": [...], "window": 2, "terminals": [...],
//    "table": {"": {"A": 0.7, "B": 0.3}, "A|B": {...}, "*": {...}}}
// Context keys join tokens with '|', so vocabulary tokens may not contain it.
struct MockSpec {
  static constexpr char kKeySeparator = '|';
  static constexpr const char* kStartKey = "";
  static constexpr const char* kDefaultKey = "*";

  std::vector<std::string> vocab;
  std::size_t window = 2;
  // Rows are kept sorted by descending probability, ties lexicographic.
  std::map<std::string, std::vector<Candidate>> table;
  std::set<std::string> terminals;

  // Checks vocabulary, row sums (1 +- 1e-9), key shapes and that every
  // context reachable from the start resolves to a row.
  void validate() const;

  // nullptr when no row matches.
  const std::vector<Candidate>* find_row(std::span<const std::string> history) const;
  const std::vector<Candidate>& row(std::span<const std::string> history) const;
  bool is_terminal(std::string_view token) const { return terminals.count(std::string(token)) > 0; }

  static std::string context_key(std::span<const std::string> tokens);

  static MockSpec from_json(const nlohmann::json& j);
  static MockSpec load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;
};

// Deterministic in-process backend over a MockSpec. Pure given (spec, seed):
// safe for unlimited parallel use.
class MockModel final : public ModelBackend {
 public:
  explicit MockModel(MockSpec spec);

  Completion complete(const CompletionRequest& request, const DecodeParams& params) override;
  // Segments `text` by greedy longest match over the vocabulary.
  std::vector<double> score(std::string_view prompt, std::string_view text) override;
  std::string describe() const override { return "mock"; }

  const MockSpec& spec() const { return spec_; }
  std::vector<std::string> segment(std::string_view text) const;

 private:
  MockSpec spec_;
};

}  // namespace forkscope
