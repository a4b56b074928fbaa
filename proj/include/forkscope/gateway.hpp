#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "forkscope/util.hpp"

namespace forkscope {

struct DecodeParams {
  double temperature = 0.0;  // 0 => greedy
  int max_tokens = 256;
  int top_logprobs = 5;  // N, caps the visible candidate set
  std::uint64_t seed = 0;

  bool greedy() const { return temperature == 0.0; }
  // Throws ValidationError.
  void validate() const;
};

nlohmann::ordered_json to_json(const DecodeParams& p);
DecodeParams decode_params_from_json(const nlohmann::json& j, DecodeParams defaults = {});

struct Candidate {
  std::string token;
  double probability = 0.0;

  bool operator==(const Candidate&) const = default;
};

// Descending probability, ties by lexicographic token order.
void sort_candidates(std::vector<Candidate>& candidates);

struct TokenStep {
  std::size_t index = 0;  // 1-based within its completion
  std::string token;
  double logprob = 0.0;
  std::vector<Candidate> candidates;
  double coverage = 0.0;  // sum of candidate probabilities

  bool operator==(const TokenStep&) const = default;
};

struct Completion {
  std::string prompt;
  std::vector<TokenStep> steps;
  std::string text;  // concatenation of step tokens
  std::string finish_reason;

  std::vector<std::string> tokens() const;
  bool operator==(const Completion&) const = default;
};

nlohmann::ordered_json to_json(const TokenStep& step);
nlohmann::ordered_json to_json(const Completion& c);
Completion completion_from_json(const nlohmann::json& j);

// A task prompt followed by a forced response prefix. Remote backends see the
// concatenated text; the mock sees the prefix as tokens, so a substituted
// token is never re-segmented.
struct CompletionRequest {
  std::string prompt;
  std::vector<std::string> response_prefix;

  std::string prefix_text() const;
  std::string text() const { return prompt + prefix_text(); }
};

class ModelBackend {
 public:
  virtual ~ModelBackend() = default;

  virtual Completion complete(const CompletionRequest& request,
                              const DecodeParams& params) = 0;
  // Log-probability of each token of `text` following `prompt`.
  virtual std::vector<double> score(std::string_view prompt, std::string_view text) = 0;
  virtual std::string describe() const = 0;
};

enum class ModelRole { policy, reference };

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
};

struct GatewayOptions {
  std::size_t max_in_flight = 8;
  RetryPolicy retry;
};

// Shareable, thread-safe front door to one backend. Bounds the number of
// in-flight backend calls and retries transport errors with exponential
// backoff.
class Gateway {
 public:
  explicit Gateway(std::shared_ptr<ModelBackend> backend,
                   ModelRole role = ModelRole::policy, GatewayOptions options = {});

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  Completion generate(std::string_view prompt, const DecodeParams& params) const;
  Completion complete(const CompletionRequest& request, const DecodeParams& params) const;

  // Exactly n completions ordered by rollout index, or BackendError naming
  // the failed (1-based) indices. Rollout i samples with a seed derived from
  // params.seed, the prefix and i.
  std::vector<Completion> continue_n(const CompletionRequest& prefix, std::size_t n,
                                     const DecodeParams& params) const;

  std::vector<double> score_sequence(std::string_view prompt,
                                     std::string_view completion_text) const;

  // Fans work out over up to max_in_flight threads. Backend calls made from
  // fn still pass through the in-flight limit.
  template <class Fn>
  std::vector<std::exception_ptr> for_each_index(std::size_t count, Fn&& fn) const {
    return parallel_for(count, options_.max_in_flight, std::forward<Fn>(fn));
  }

  ModelRole role() const { return role_; }
  const GatewayOptions& options() const { return options_; }
  std::string describe() const { return backend_->describe(); }

 private:
  template <class Call>
  auto with_retry(Call&& call) const;

  std::shared_ptr<ModelBackend> backend_;
  ModelRole role_;
  GatewayOptions options_;
  mutable std::counting_semaphore<> in_flight_;
};

std::uint64_t rollout_seed(std::uint64_t base, const CompletionRequest& prefix,
                           std::size_t rollout_index);

}  // namespace forkscope
