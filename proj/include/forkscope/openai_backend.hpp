#pragma once

#include <chrono>
#include <memory>
#include <string>

#include <json.hpp>

#include "forkscope/gateway.hpp"

namespace forkscope {

struct RemoteConfig {
  std::string base_url;  // scheme://host[:port][/prefix]
  std::string model;
  std::string api_key;   // bearer token; empty sends no Authorization header
  bool chat = false;     // use /v1/chat/completions instead of /v1/completions
  std::chrono::seconds timeout{120};

  // FORKSCOPE_BASE_URL / FORKSCOPE_API_KEY fill whatever is unset.
  static RemoteConfig from_environment(RemoteConfig base);
};

// OpenAI-compatible HTTP backend. Requests top-N logprobs and refuses to run
// against servers that do not return them.
class OpenAiBackend final : public ModelBackend {
 public:
  explicit OpenAiBackend(RemoteConfig config);
  ~OpenAiBackend() override;

  Completion complete(const CompletionRequest& request, const DecodeParams& params) override;
  // Teacher-forced scoring through echo=true on /v1/completions.
  std::vector<double> score(std::string_view prompt, std::string_view text) override;
  std::string describe() const override;

  // Wire-format helpers, exposed for tests.
  nlohmann::json completion_body(const CompletionRequest& request,
                                 const DecodeParams& params) const;
  static Completion parse_completion(const nlohmann::json& response, std::string prompt,
                                     int top_logprobs);
  static Completion parse_chat_completion(const nlohmann::json& response, std::string prompt,
                                          int top_logprobs);

 private:
  nlohmann::json post(const std::string& endpoint, const nlohmann::json& body) const;

  RemoteConfig config_;
  std::string host_;         // scheme://host:port
  std::string path_prefix_;  // e.g. "" or "/v1"
};

}  // namespace forkscope
