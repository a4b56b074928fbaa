#pragma once

#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

namespace forkscope::testing {

// Local OpenAI-style HTTP server for wire tests. The handler maps
// (path, request body, authorization header) to (status, response body).
class FakeOpenAi {
 public:
  struct Reply {
    int status = 200;
    std::string body;
  };
  struct Seen {
    std::string path;
    nlohmann::json body;
    std::string authorization;
  };
  using Handler = std::function<Reply(const Seen&)>;

  explicit FakeOpenAi(Handler handler) : handler_(std::move(handler)) {
    auto route = [this](const httplib::Request& req, httplib::Response& res) {
      Seen seen{req.path, nlohmann::json::parse(req.body, nullptr, false),
                req.get_header_value("Authorization")};
      {
        std::lock_guard lock(mu_);
        seen_.push_back(seen);
      }
      const Reply reply = handler_(seen);
      res.status = reply.status;
      res.set_content(reply.body, "application/json");
    };
    server_.Post(R"(/.*)", route);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~FakeOpenAi() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  FakeOpenAi(const FakeOpenAi&) = delete;
  FakeOpenAi& operator=(const FakeOpenAi&) = delete;

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  std::vector<Seen> seen() const {
    std::lock_guard lock(mu_);
    return seen_;
  }

 private:
  Handler handler_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  mutable std::mutex mu_;
  std::vector<Seen> seen_;
};

// A /v1/completions body with one choice whose tokens carry the given top
// logprob maps.
inline std::string completions_reply(
    const std::vector<std::string>& tokens,
    const std::vector<std::vector<std::pair<std::string, double>>>& tops,
    const std::string& finish = "stop") {
  nlohmann::json lp;
  lp["tokens"] = tokens;
  std::vector<double> token_lps;
  nlohmann::json top_list = nlohmann::json::array();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    nlohmann::json m = nlohmann::json::object();
    double chosen = -10.0;
    for (const auto& [t, v] : tops[i]) {
      m[t] = v;
      if (t == tokens[i]) chosen = v;
    }
    token_lps.push_back(chosen);
    top_list.push_back(m);
  }
  lp["token_logprobs"] = token_lps;
  lp["top_logprobs"] = top_list;
  std::string text;
  for (const auto& t : tokens) text += t;
  nlohmann::json choice{{"index", 0}, {"text", text}, {"logprobs", lp}, {"finish_reason", finish}};
  return nlohmann::json{{"object", "text_completion"}, {"choices", {choice}}}.dump();
}

}  // namespace forkscope::testing
