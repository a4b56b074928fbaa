#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "forkscope/gateway.hpp"
#include "forkscope/mock_model.hpp"
#include "forkscope/reward.hpp"

namespace forkscope {

enum class EntropyMode {
  renormalized,     // rescale visible candidates to sum 1
  residual_bucket,  // add one pseudo-candidate holding 1 - coverage
};

std::string_view to_string(EntropyMode mode);
EntropyMode parse_entropy_mode(std::string_view name);

// Natural-log entropy of a step's visible distribution. Throws
// ValidationError on empty candidates or non-positive probabilities.
double entropy(const TokenStep& step, EntropyMode mode = EntropyMode::renormalized);

struct RftdConfig {
  std::size_t k = 5;   // candidate positions
  std::size_t m = 3;   // substitutes per position
  std::size_t n = 10;  // rollouts per substitute
  double alpha = 0.5;  // forking iff max rho > alpha
  DecodeParams rollout{0.7, 256, 5, 0};
  EntropyMode entropy_mode = EntropyMode::renormalized;

  void validate() const;
  // Stable digest of every field; detection results carry it so that
  // aggregation can refuse to mix runs.
  std::string hash() const;
};

nlohmann::ordered_json to_json(const RftdConfig& c);
RftdConfig rftd_config_from_json(const nlohmann::json& j, RftdConfig defaults = {});

struct PositionEntropy {
  std::size_t position = 0;  // 1-based
  std::string token;
  double entropy = 0.0;

  bool operator==(const PositionEntropy&) const = default;
};

// Top-k positions by entropy, descending; ties go to the earlier position.
std::vector<PositionEntropy> top_k_positions(const Completion& response, std::size_t k,
                                             EntropyMode mode = EntropyMode::renormalized);

// The m most probable visible candidates other than the emitted token.
std::vector<std::string> top_m_substitutes(const TokenStep& step, std::size_t m);

// 1 when the continuation's answer differs from the original or fails to
// parse. The original must parse.
int divergent(const std::optional<std::string>& continuation_answer,
              const std::optional<std::string>& original_answer, Task task = Task::nsm);

struct RolloutSummary {
  std::optional<std::string> answer;
  bool divergent = false;
  std::string finish_reason;
  std::size_t token_count = 0;

  bool operator==(const RolloutSummary&) const = default;
};

struct SubstituteTrial {
  std::size_t position = 0;
  std::size_t substitute_index = 0;  // rank among the position's substitutes
  std::string substitute;
  std::vector<RolloutSummary> rollouts;
  std::size_t divergent_count = 0;
  std::size_t unparseable_count = 0;
  double rho = 0.0;

  bool operator==(const SubstituteTrial&) const = default;
};

struct DetectionResult {
  std::string id;
  std::string config_hash;
  std::string endpoint;
  std::string original_answer;
  std::string response_text;
  EntropyMode entropy_mode = EntropyMode::renormalized;
  double alpha = 0.5;
  std::vector<PositionEntropy> candidates;  // T
  std::vector<std::size_t> skipped;         // positions in T without substitutes
  std::vector<SubstituteTrial> trials;      // S with rho per substitute
  std::vector<PositionEntropy> forking;     // F, original tokens

  bool operator==(const DetectionResult&) const = default;
};

nlohmann::ordered_json to_json(const DetectionResult& r);
DetectionResult detection_from_json(const nlohmann::json& j);

// Everything a detection run needs besides the response itself.
struct DetectionContext {
  const Gateway& gateway;
  const ExtractionRule& rule;
  RftdConfig config;
};

// Substitutes `substitute` at 1-based `position` and measures how often n
// rollouts from the edited prefix end in a different answer.
SubstituteTrial divergence_rate(const DetectionContext& ctx, std::string_view task_prompt,
                                const Completion& response, std::size_t position,
                                std::string_view substitute, const std::string& original_answer,
                                std::uint64_t trial_seed);

// Rollout-based forking token detection over a greedily decoded response.
DetectionResult detect_forking(const DetectionContext& ctx, std::string_view task_prompt,
                               const Completion& response, std::string id = {});

// Re-thresholds finished trials. Monotone: a larger alpha yields a subset.
std::vector<PositionEntropy> forking_set(const std::vector<PositionEntropy>& candidates,
                                         const std::vector<SubstituteTrial>& trials, double alpha);

struct ExactDivergence {
  double divergent_mass = 0.0;    // terminated paths whose answer differs
  double unterminated_mass = 0.0; // paths cut off at the depth bound
  std::size_t nodes = 0;
};

// Exact oracle on a mock: enumerates every continuation of prefix + substitute
// under the rollout temperature and sums the probability of divergent leaves.
ExactDivergence exact_divergence(const MockSpec& spec, const std::vector<std::string>& prefix,
                                 std::string_view substitute, const ExtractionRule& rule,
                                 const std::string& original_answer, double temperature,
                                 std::size_t depth_bound, std::size_t node_budget = 1'000'000);

}  // namespace forkscope
