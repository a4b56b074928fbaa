#pragma once

#include <atomic>
#include <chrono>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "forkscope/dataset.hpp"
#include "forkscope/gateway.hpp"
#include "forkscope/mock_model.hpp"

namespace forkscope::testing {

// Accumulates rows and derives the vocabulary from every token mentioned.
class SpecBuilder {
 public:
  explicit SpecBuilder(std::size_t window = 2) { spec_.window = window; }

  SpecBuilder& row(const std::vector<std::string>& context,
                   const std::vector<std::pair<std::string, double>>& candidates);
  SpecBuilder& default_row(const std::vector<std::pair<std::string, double>>& candidates);
  SpecBuilder& terminal(const std::string& token);
  MockSpec build() const;

 private:
  void note(const std::string& token);

  MockSpec spec_;
  std::vector<std::string> order_;
};

// One position on the greedy path of a chain spec. `main` is emitted greedily
// with probability `main_p`; each alternative carries its own probability and
// the probability (before tempering) that a rollout after it answers " no".
struct ChainPosition {
  std::string main;
  double main_p = 1.0;
  struct Alt {
    std::string token;
    double p = 0.0;
    double no_p = 0.0;  // 0 => always " yes", 1 => always " no", -1 => unparseable
  };
  std::vector<Alt> alts;
};

// Greedy response: the main tokens followed by " yes" and "<eos>". After an
// alternative the next row decides between " yes" and " no" directly.
MockSpec chain_spec(const std::vector<ChainPosition>& positions);

// Probability of " no" after tempering a two-way row {no: x, yes: 1-x}.
double tempered_two_way(double x, double temperature);

// Inverse of tempered_two_way.
double untempered_for(double target, double temperature);

// Replays canned completions or failures, optionally after a delay. Tracks
// call counts and the peak number of concurrent calls.
class ScriptedBackend final : public ModelBackend {
 public:
  using Handler = std::function<Completion(const CompletionRequest&, const DecodeParams&)>;

  explicit ScriptedBackend(Handler handler, std::chrono::milliseconds delay = {})
      : handler_(std::move(handler)), delay_(delay) {}

  Completion complete(const CompletionRequest& request, const DecodeParams& params) override;
  std::vector<double> score(std::string_view prompt, std::string_view text) override;
  std::string describe() const override { return "scripted"; }

  int calls() const { return calls_.load(); }
  int peak_in_flight() const { return peak_.load(); }

 private:
  Handler handler_;
  std::chrono::milliseconds delay_;
  std::atomic<int> calls_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> peak_{0};
};

// A completion whose steps are the given tokens, each with a single visible
// candidate of probability 1.
Completion plain_completion(const std::vector<std::string>& tokens, std::string prompt = {});

// Per-test scratch directory under the system temp dir, removed on exit.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// A loopback port with nothing listening on it.
int unused_port();

// n NSM records "r01".. with alternating yes/no gold answers and rationales
// whose final verdict matches gold.
std::vector<Record> nsm_records(std::size_t n, bool with_rationales);

}  // namespace forkscope::testing
