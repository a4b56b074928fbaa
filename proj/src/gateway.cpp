#include "forkscope/gateway.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "forkscope/error.hpp"

namespace forkscope {

void DecodeParams::validate() const {
  if (!std::isfinite(temperature) || temperature < 0.0) {
    throw ValidationError(fmt::format("temperature must be >= 0 (got {})", temperature));
  }
  if (max_tokens < 1) {
    throw ValidationError(fmt::format("max_tokens must be >= 1 (got {})", max_tokens));
  }
  if (top_logprobs < 2) {
    throw ValidationError(fmt::format("top_logprobs must be >= 2 (got {})", top_logprobs));
  }
}

nlohmann::ordered_json to_json(const DecodeParams& p) {
  return {{"temperature", p.temperature},
          {"max_tokens", p.max_tokens},
          {"top_logprobs", p.top_logprobs},
          {"seed", p.seed}};
}

DecodeParams decode_params_from_json(const nlohmann::json& j, DecodeParams p) {
  try {
    if (j.contains("temperature")) p.temperature = j.at("temperature").get<double>();
    if (j.contains("max_tokens")) p.max_tokens = j.at("max_tokens").get<int>();
    if (j.contains("top_logprobs")) p.top_logprobs = j.at("top_logprobs").get<int>();
    if (j.contains("seed")) p.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("decode params: {}", e.what()));
  }
  p.validate();
  return p;
}

void sort_candidates(std::vector<Candidate>& candidates) {
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.probability != b.probability) return a.probability > b.probability;
    return a.token < b.token;
  });
}

std::vector<std::string> Completion::tokens() const {
  std::vector<std::string> out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back(s.token);
  return out;
}

nlohmann::ordered_json to_json(const TokenStep& step) {
  nlohmann::ordered_json j;
  j["index"] = step.index;
  j["token"] = step.token;
  j["logprob"] = step.logprob;
  j["coverage"] = step.coverage;
  auto cands = nlohmann::ordered_json::array();
  for (const auto& c : step.candidates) {
    cands.push_back({{"token", c.token}, {"probability", c.probability}});
  }
  j["candidates"] = std::move(cands);
  return j;
}

nlohmann::ordered_json to_json(const Completion& c) {
  nlohmann::ordered_json j;
  j["prompt"] = c.prompt;
  j["text"] = c.text;
  j["finish_reason"] = c.finish_reason;
  auto steps = nlohmann::ordered_json::array();
  for (const auto& s : c.steps) steps.push_back(to_json(s));
  j["steps"] = std::move(steps);
  return j;
}

Completion completion_from_json(const nlohmann::json& j) {
  try {
    Completion c;
    c.prompt = j.at("prompt").get<std::string>();
    c.finish_reason = j.value("finish_reason", std::string{});
    for (const auto& sj : j.at("steps")) {
      TokenStep s;
      s.index = sj.at("index").get<std::size_t>();
      s.token = sj.at("token").get<std::string>();
      s.logprob = sj.at("logprob").get<double>();
      s.coverage = sj.at("coverage").get<double>();
      for (const auto& cj : sj.at("candidates")) {
        s.candidates.push_back({cj.at("token").get<std::string>(),
                                cj.at("probability").get<double>()});
      }
      c.text += s.token;
      c.steps.push_back(std::move(s));
    }
    if (j.contains("text") && j.at("text").get<std::string>() != c.text) {
      throw ValidationError("completion text does not equal its concatenated tokens");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("malformed completion: {}", e.what()));
  }
}

std::string CompletionRequest::prefix_text() const {
  std::string out;
  for (const auto& t : response_prefix) out += t;
  return out;
}

std::uint64_t rollout_seed(std::uint64_t base, const CompletionRequest& prefix,
                           std::size_t rollout_index) {
  std::uint64_t h = fnv1a64(prefix.prompt);
  for (const auto& t : prefix.response_prefix) {
    h = mix_seed(h, fnv1a64(t));
  }
  return mix_seed(mix_seed(base, h), rollout_index);
}

Gateway::Gateway(std::shared_ptr<ModelBackend> backend, ModelRole role, GatewayOptions options)
    : backend_(std::move(backend)),
      role_(role),
      options_(options),
      in_flight_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(options.max_in_flight, 1))) {
  if (!backend_) throw ValidationError("gateway needs a backend");
  if (options_.retry.attempts < 1) throw ValidationError("retry attempts must be >= 1");
}

template <class Call>
auto Gateway::with_retry(Call&& call) const {
  auto backoff = options_.retry.initial_backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      in_flight_.acquire();
      struct Release {
        std::counting_semaphore<>& s;
        ~Release() { s.release(); }
      } release{in_flight_};
      return call();
    } catch (const TransportError& e) {
      if (attempt >= options_.retry.attempts) throw;
      spdlog::warn("transport error (attempt {}/{}): {}; retrying in {} ms", attempt,
                   options_.retry.attempts, e.what(), backoff.count());
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
}

Completion Gateway::complete(const CompletionRequest& request, const DecodeParams& params) const {
  params.validate();
  return with_retry([&] { return backend_->complete(request, params); });
}

Completion Gateway::generate(std::string_view prompt, const DecodeParams& params) const {
  return complete(CompletionRequest{std::string(prompt), {}}, params);
}

std::vector<Completion> Gateway::continue_n(const CompletionRequest& prefix, std::size_t n,
                                            const DecodeParams& params) const {
  if (n < 1) throw ValidationError("continue_n needs n >= 1");
  params.validate();
  std::vector<Completion> out(n);
  auto errors = for_each_index(n, [&](std::size_t i) {
    DecodeParams p = params;
    p.seed = rollout_seed(params.seed, prefix, i);
    out[i] = with_retry([&] { return backend_->complete(prefix, p); });
  });
  std::vector<std::size_t> failed;
  std::string first_message;
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    failed.push_back(i + 1);
    try {
      std::rethrow_exception(errors[i]);
    } catch (const BackendError& e) {
      if (first_message.empty()) first_message = e.what();
    }
    // anything that is not a backend failure propagates unchanged
  }
  if (!failed.empty()) {
    throw BackendError(fmt::format("continue_n: rollouts {} of {} failed: {}",
                                   fmt::join(failed, ","), n, first_message));
  }
  return out;
}

std::vector<double> Gateway::score_sequence(std::string_view prompt,
                                            std::string_view completion_text) const {
  if (completion_text.empty()) return {};
  return with_retry([&] { return backend_->score(prompt, completion_text); });
}

}  // namespace forkscope
