#include "forkscope/openai_backend.hpp"

#include <cmath>
#include <cstdlib>

#include <fmt/format.h>
#include <httplib.h>

#include "forkscope/error.hpp"
#include "forkscope/util.hpp"

namespace forkscope {

RemoteConfig RemoteConfig::from_environment(RemoteConfig base) {
  if (base.base_url.empty()) {
    if (const char* url = std::getenv("FORKSCOPE_BASE_URL")) base.base_url = url;
  }
  if (base.api_key.empty()) {
    if (const char* key = std::getenv("FORKSCOPE_API_KEY")) base.api_key = key;
  }
  return base;
}

OpenAiBackend::OpenAiBackend(RemoteConfig config) : config_(std::move(config)) {
  if (config_.base_url.empty()) throw ValidationError("remote backend needs a base URL");
  const auto scheme_end = config_.base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw ValidationError(fmt::format("base URL '{}' has no scheme", config_.base_url));
  }
  const auto path_start = config_.base_url.find('/', scheme_end + 3);
  host_ = config_.base_url.substr(0, path_start);
  if (path_start != std::string::npos) path_prefix_ = config_.base_url.substr(path_start);
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
}

OpenAiBackend::~OpenAiBackend() = default;

std::string OpenAiBackend::describe() const {
  return fmt::format("{}{} model={}", host_, path_prefix_, config_.model);
}

nlohmann::json OpenAiBackend::post(const std::string& endpoint, const nlohmann::json& body) const {
  std::string path = path_prefix_.ends_with("/v1") ? path_prefix_ + endpoint
                                                    : path_prefix_ + "/v1" + endpoint;
  httplib::Client client(host_);
  client.set_connection_timeout(config_.timeout);
  client.set_read_timeout(config_.timeout);
  client.set_write_timeout(config_.timeout);
  httplib::Headers headers;
  if (!config_.api_key.empty()) {
    headers.emplace("Authorization", "Bearer " + config_.api_key);
  }
  auto res = client.Post(path, headers, body.dump(), "application/json");
  if (!res) {
    throw TransportError(fmt::format("POST {}{}: {}", host_, path, httplib::to_string(res.error())));
  }
  const int status = res->status;
  if (status == 429 || status >= 500) {
    throw TransportError(fmt::format("POST {}: HTTP {}", path, status));
  }
  if (status == 401 || status == 403) {
    throw BackendError(fmt::format("POST {}: authentication failed (HTTP {})", path, status));
  }
  if (status >= 400) {
    const std::string lower = to_lower(res->body);
    if (lower.find("context length") != std::string::npos ||
        lower.find("context_length") != std::string::npos ||
        lower.find("maximum context") != std::string::npos) {
      throw ContextOverflowError(fmt::format("POST {}: prompt exceeds the context window", path));
    }
    throw BackendError(fmt::format("POST {}: HTTP {}: {}", path, status, res->body.substr(0, 300)));
  }
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(fmt::format("POST {}: response is not JSON: {}", path, e.what()));
  }
}

nlohmann::json OpenAiBackend::completion_body(const CompletionRequest& request,
                                              const DecodeParams& params) const {
  nlohmann::json body;
  body["model"] = config_.model;
  body["max_tokens"] = params.max_tokens;
  body["temperature"] = params.temperature;
  body["seed"] = params.seed;
  if (config_.chat) {
    body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", request.prompt}}});
    if (!request.response_prefix.empty()) {
      // vLLM extension: resume the assistant turn instead of starting a new one.
      body["messages"].push_back({{"role", "assistant"}, {"content", request.prefix_text()}});
      body["continue_final_message"] = true;
      body["add_generation_prompt"] = false;
    }
    body["logprobs"] = true;
    body["top_logprobs"] = params.top_logprobs;
  } else {
    body["prompt"] = request.text();
    body["logprobs"] = params.top_logprobs;
  }
  return body;
}

namespace {

TokenStep make_step(std::size_t index, std::string token, double logprob,
                    std::vector<Candidate> candidates, int top_logprobs) {
  sort_candidates(candidates);
  if (candidates.size() > static_cast<std::size_t>(top_logprobs)) {
    candidates.resize(static_cast<std::size_t>(top_logprobs));
  }
  if (candidates.empty()) {
    throw CapabilityError(fmt::format("backend returned no top logprobs at token {}", index));
  }
  TokenStep step;
  step.index = index;
  step.token = std::move(token);
  step.logprob = logprob;
  for (const auto& c : candidates) step.coverage += c.probability;
  step.candidates = std::move(candidates);
  return step;
}

const nlohmann::json& first_choice(const nlohmann::json& response) {
  if (!response.contains("choices") || !response["choices"].is_array() ||
      response["choices"].empty()) {
    throw BackendError("response has no choices");
  }
  return response["choices"][0];
}

}  // namespace

Completion OpenAiBackend::parse_completion(const nlohmann::json& response, std::string prompt,
                                           int top_logprobs) {
  const auto& choice = first_choice(response);
  const auto lp = choice.find("logprobs");
  if (lp == choice.end() || !lp->is_object() || !lp->contains("top_logprobs") ||
      !(*lp)["top_logprobs"].is_array()) {
    throw CapabilityError("backend does not return top logprobs");
  }
  try {
    const auto& tokens = lp->at("tokens");
    const auto& token_lps = lp->at("token_logprobs");
    const auto& tops = lp->at("top_logprobs");
    if (tokens.size() != token_lps.size() || tokens.size() != tops.size()) {
      throw BackendError("logprob arrays have mismatched lengths");
    }
    Completion c;
    c.prompt = std::move(prompt);
    c.finish_reason = choice.value("finish_reason", std::string{});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (!tops[i].is_object()) {
        throw CapabilityError(fmt::format("backend returned no top logprobs at token {}", i + 1));
      }
      std::vector<Candidate> cands;
      for (const auto& [tok, v] : tops[i].items()) cands.push_back({tok, std::exp(v.get<double>())});
      auto token = tokens[i].get<std::string>();
      c.text += token;
      c.steps.push_back(make_step(i + 1, std::move(token), token_lps[i].get<double>(),
                                  std::move(cands), top_logprobs));
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(fmt::format("malformed completions response: {}", e.what()));
  }
}

Completion OpenAiBackend::parse_chat_completion(const nlohmann::json& response,
                                                std::string prompt, int top_logprobs) {
  const auto& choice = first_choice(response);
  const auto lp = choice.find("logprobs");
  if (lp == choice.end() || !lp->is_object() || !lp->contains("content") ||
      !(*lp)["content"].is_array()) {
    throw CapabilityError("backend does not return top logprobs");
  }
  try {
    Completion c;
    c.prompt = std::move(prompt);
    c.finish_reason = choice.value("finish_reason", std::string{});
    std::size_t index = 0;
    for (const auto& entry : (*lp)["content"]) {
      ++index;
      std::vector<Candidate> cands;
      if (entry.contains("top_logprobs") && entry["top_logprobs"].is_array()) {
        for (const auto& t : entry["top_logprobs"]) {
          cands.push_back({t.at("token").get<std::string>(), std::exp(t.at("logprob").get<double>())});
        }
      }
      auto token = entry.at("token").get<std::string>();
      c.text += token;
      c.steps.push_back(make_step(index, std::move(token), entry.at("logprob").get<double>(),
                                  std::move(cands), top_logprobs));
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(fmt::format("malformed chat response: {}", e.what()));
  }
}

Completion OpenAiBackend::complete(const CompletionRequest& request, const DecodeParams& params) {
  params.validate();
  const auto body = completion_body(request, params);
  if (config_.chat) {
    return parse_chat_completion(post("/chat/completions", body), request.text(),
                                 params.top_logprobs);
  }
  return parse_completion(post("/completions", body), request.text(), params.top_logprobs);
}

std::vector<double> OpenAiBackend::score(std::string_view prompt, std::string_view text) {
  if (config_.chat) throw CapabilityError("chat endpoint cannot teacher-force a fixed completion");
  nlohmann::json body;
  body["model"] = config_.model;
  body["prompt"] = std::string(prompt) + std::string(text);
  body["echo"] = true;
  body["max_tokens"] = 1;
  body["temperature"] = 0.0;
  body["logprobs"] = 1;
  const auto response = post("/completions", body);
  const auto& choice = first_choice(response);
  const auto lp = choice.find("logprobs");
  if (lp == choice.end() || !lp->is_object() || !lp->contains("text_offset") ||
      !lp->contains("token_logprobs")) {
    throw CapabilityError("backend cannot teacher-force: echo logprobs missing");
  }
  const auto& offsets = (*lp)["text_offset"];
  const auto& lps = (*lp)["token_logprobs"];
  const std::size_t begin = prompt.size();
  const std::size_t end = prompt.size() + text.size();
  std::vector<double> out;
  for (std::size_t i = 0; i < offsets.size() && i < lps.size(); ++i) {
    const auto off = offsets[i].get<std::size_t>();
    if (off < begin || off >= end) continue;
    if (!lps[i].is_number()) throw CapabilityError("backend returned a null logprob for echoed text");
    out.push_back(lps[i].get<double>());
  }
  return out;
}

}  // namespace forkscope
