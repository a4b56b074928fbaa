#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>
#include <stdexcept>
#include <thread>

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <fmt/format.h>

namespace forkscope::testing {

void SpecBuilder::note(const std::string& token) {
  if (std::find(order_.begin(), order_.end(), token) == order_.end()) order_.push_back(token);
}

SpecBuilder& SpecBuilder::row(const std::vector<std::string>& context,
                              const std::vector<std::pair<std::string, double>>& candidates) {
  for (const auto& t : context) note(t);
  std::vector<Candidate> cands;
  for (const auto& [token, p] : candidates) {
    note(token);
    cands.push_back({token, p});
  }
  sort_candidates(cands);
  const auto key = MockSpec::context_key(context);
  if (!spec_.table.emplace(key, std::move(cands)).second) {
    throw std::logic_error("duplicate row for context '" + key + "'");
  }
  return *this;
}

SpecBuilder& SpecBuilder::default_row(const std::vector<std::pair<std::string, double>>& candidates) {
  std::vector<Candidate> cands;
  for (const auto& [token, p] : candidates) {
    note(token);
    cands.push_back({token, p});
  }
  sort_candidates(cands);
  spec_.table[MockSpec::kDefaultKey] = std::move(cands);
  return *this;
}

SpecBuilder& SpecBuilder::terminal(const std::string& token) {
  note(token);
  spec_.terminals.insert(token);
  return *this;
}

MockSpec SpecBuilder::build() const {
  MockSpec spec = spec_;
  spec.vocab = order_;
  spec.validate();
  return spec;
}

namespace {

std::vector<std::string> last_two(const std::vector<std::string>& history) {
  const std::size_t start = history.size() > 2 ? history.size() - 2 : 0;
  return {history.begin() + static_cast<std::ptrdiff_t>(start), history.end()};
}

}  // namespace

MockSpec chain_spec(const std::vector<ChainPosition>& positions) {
  SpecBuilder b;
  b.terminal("<eos>");
  std::vector<std::string> history;
  for (const auto& pos : positions) {
    std::vector<std::pair<std::string, double>> cands{{pos.main, pos.main_p}};
    for (const auto& alt : pos.alts) cands.emplace_back(alt.token, alt.p);
    b.row(last_two(history), cands);
    for (const auto& alt : pos.alts) {
      auto branch = history;
      branch.push_back(alt.token);
      const auto ctx = last_two(branch);
      if (alt.no_p < 0) {
        b.row(ctx, {{"<eos>", 1.0}});
        continue;
      }
      std::vector<std::pair<std::string, double>> verdict;
      if (alt.no_p > 0) verdict.emplace_back(" no", alt.no_p);
      if (alt.no_p < 1) verdict.emplace_back(" yes", 1.0 - alt.no_p);
      b.row(ctx, verdict);
      for (const auto& [v, _] : verdict) b.row({alt.token, v}, {{"<eos>", 1.0}});
    }
    history.push_back(pos.main);
  }
  b.row(last_two(history), {{" yes", 1.0}});
  b.row({history.back(), " yes"}, {{"<eos>", 1.0}});
  return b.build();
}

double tempered_two_way(double x, double temperature) {
  const double a = std::pow(x, 1.0 / temperature);
  const double b = std::pow(1.0 - x, 1.0 / temperature);
  return a / (a + b);
}

double untempered_for(double target, double temperature) {
  const double a = std::pow(target, temperature);
  const double b = std::pow(1.0 - target, temperature);
  return a / (a + b);
}

Completion ScriptedBackend::complete(const CompletionRequest& request, const DecodeParams& params) {
  ++calls_;
  const int now = ++in_flight_;
  int peak = peak_.load();
  while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
  }
  struct Leave {
    std::atomic<int>& n;
    ~Leave() { --n; }
  } leave{in_flight_};
  if (delay_.count() > 0) std::this_thread::sleep_for(delay_);
  return handler_(request, params);
}

std::vector<double> ScriptedBackend::score(std::string_view, std::string_view text) {
  return std::vector<double>(text.empty() ? 0 : 1, -0.5);
}

Completion plain_completion(const std::vector<std::string>& tokens, std::string prompt) {
  Completion c;
  c.prompt = std::move(prompt);
  std::size_t i = 0;
  for (const auto& t : tokens) {
    TokenStep s;
    s.index = ++i;
    s.token = t;
    s.logprob = 0.0;
    s.candidates = {{t, 1.0}};
    s.coverage = 1.0;
    c.text += t;
    c.steps.push_back(std::move(s));
  }
  c.finish_reason = "stop";
  return c;
}

TempDir::TempDir() {
  std::string pattern = (std::filesystem::temp_directory_path() / "forkscope-XXXXXX").string();
  if (::mkdtemp(pattern.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
  path_ = pattern;
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

int unused_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw std::runtime_error("socket failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  socklen_t len = sizeof(addr);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
    ::close(fd);
    throw std::runtime_error("cannot reserve a port");
  }
  ::close(fd);
  return ntohs(addr.sin_port);
}

std::vector<Record> nsm_records(std::size_t n, bool with_rationales) {
  std::vector<Record> out;
  for (std::size_t i = 0; i < n; ++i) {
    Record r;
    r.id = fmt::format("r{:02}", i + 1);
    r.task = Task::nsm;
    const bool same = i % 2 == 0;
    r.question = fmt::format(
        "Value 1: revenue of {} million in 2023 (annual report, consolidated)\n"
        "Value 2: revenue of {} million in {} (prospectus, consolidated)",
        100 + i, 100 + i, same ? 2023 : 2022);
    r.answer = same ? "yes" : "no";
    if (with_rationales) {
      r.rationale = Rationale{
          same ? "Both values report consolidated revenue for 2023 with the same amount, so the "
                 "subject, time and scope agree. The answer is yes."
               : "Value 1 covers 2023 while Value 2 covers 2022, so the time period differs. "
                 "The answer is no.",
          Provenance::human};
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace forkscope::testing
