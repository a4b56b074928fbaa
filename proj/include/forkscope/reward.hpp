#pragma once

#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "forkscope/dataset.hpp"

namespace forkscope {

// How a final label is read out of a response. NSM: <answer> tags, then the
// last standalone yes/no (after the final </rationale> when one exists). TPC:
// <answer> tags, then the last "Label:" line, then the last exact occurrence
// of any taxonomy label. The same rule is used for rewards, evaluation and
// forking-token divergence.
class ExtractionRule {
 public:
  static ExtractionRule nsm() { return ExtractionRule(Task::nsm, nullptr); }
  // The taxonomy must outlive the rule.
  static ExtractionRule tpc(const Taxonomy& taxonomy) { return ExtractionRule(Task::tpc, &taxonomy); }

  Task task() const { return task_; }
  const Taxonomy* taxonomy() const { return taxonomy_; }

 private:
  ExtractionRule(Task task, const Taxonomy* taxonomy) : task_(task), taxonomy_(taxonomy) {}

  Task task_;
  const Taxonomy* taxonomy_;
};

std::optional<std::string> extract(std::string_view response, const ExtractionRule& rule);

// Case-insensitive for NSM, exact after trimming for TPC.
bool labels_equal(std::string_view a, std::string_view b, Task task);

// v(y, a): 1 iff the extracted label equals gold.
int verify(std::string_view response, std::string_view gold, const ExtractionRule& rule);

// Single-sample sequence KL estimate: sum_t (policy_t - reference_t).
double kl_estimate(std::span<const double> policy_logprobs,
                   std::span<const double> reference_logprobs);

struct RewardConfig {
  double beta = 0.0;
};

// v(y, a) - beta * KL.
double rlvr_reward(std::string_view response, std::string_view gold,
                   std::span<const double> policy_logprobs,
                   std::span<const double> reference_logprobs, const RewardConfig& config,
                   const ExtractionRule& rule);

struct EvalSets {
  std::set<std::string> gold;       // g
  std::set<std::string> predicted;  // p
};

struct MetricSummary {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t gold_count = 0;
  std::size_t predicted_count = 0;
  std::size_t overlap_count = 0;
  // Set when the matching denominator was zero and the metric defaulted to 0.
  bool precision_undefined = false;
  bool recall_undefined = false;
};

MetricSummary pair_metrics(const EvalSets& sets);

double f1_score(double precision, double recall);

// Fraction of rows whose prediction parses and equals gold. Throws on empty input.
double accuracy(std::span<const std::pair<std::optional<std::string>, std::string>> rows,
                Task task = Task::nsm);

nlohmann::ordered_json to_json(const MetricSummary& m);

}  // namespace forkscope
