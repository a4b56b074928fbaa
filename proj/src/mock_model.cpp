#include "forkscope/mock_model.hpp"

#include <cmath>
#include <fstream>
#include <queue>
#include <random>

#include <fmt/format.h>

#include "forkscope/error.hpp"
#include "forkscope/util.hpp"

namespace forkscope {

std::string MockSpec::context_key(std::span<const std::string> tokens) {
  std::string key;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) key.push_back(kKeySeparator);
    key += tokens[i];
  }
  return key;
}

const std::vector<Candidate>* MockSpec::find_row(std::span<const std::string> history) const {
  const std::size_t n = history.size();
  for (std::size_t w = std::min(window, n); w >= 1; --w) {
    auto it = table.find(context_key(history.subspan(n - w)));
    if (it != table.end()) return &it->second;
  }
  if (n == 0) {
    if (auto it = table.find(kStartKey); it != table.end()) return &it->second;
  }
  if (auto it = table.find(kDefaultKey); it != table.end()) return &it->second;
  return nullptr;
}

const std::vector<Candidate>& MockSpec::row(std::span<const std::string> history) const {
  const auto* r = find_row(history);
  if (r == nullptr) {
    const std::size_t w = std::min(window, history.size());
    throw ValidationError(fmt::format("mock has no row for context '{}'",
                                      context_key(history.subspan(history.size() - w))));
  }
  return *r;
}

void MockSpec::validate() const {
  if (vocab.empty()) throw ValidationError("mock vocab is empty");
  if (window < 1) throw ValidationError("mock window must be >= 1");
  std::set<std::string> vocab_set;
  for (const auto& t : vocab) {
    if (t.empty()) throw ValidationError("mock vocab contains an empty token");
    if (t.find(kKeySeparator) != std::string::npos) {
      throw ValidationError(fmt::format("mock token '{}' contains the key separator '|'", t));
    }
    if (!vocab_set.insert(t).second) {
      throw ValidationError(fmt::format("duplicate mock token '{}'", t));
    }
  }
  for (const auto& t : terminals) {
    if (!vocab_set.count(t)) throw ValidationError(fmt::format("terminal '{}' is not in vocab", t));
  }
  for (const auto& [key, row] : table) {
    if (key != kStartKey && key != kDefaultKey) {
      std::size_t parts = 0;
      std::size_t pos = 0;
      while (true) {
        auto next = key.find(kKeySeparator, pos);
        auto part = key.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
        if (!vocab_set.count(part)) {
          throw ValidationError(fmt::format("context '{}' uses unknown token '{}'", key, part));
        }
        ++parts;
        if (next == std::string::npos) break;
        pos = next + 1;
      }
      if (parts > window) {
        throw ValidationError(fmt::format("context '{}' is longer than window {}", key, window));
      }
    }
    if (row.empty()) throw ValidationError(fmt::format("row '{}' is empty", key));
    double sum = 0.0;
    for (const auto& c : row) {
      if (!vocab_set.count(c.token)) {
        throw ValidationError(fmt::format("row '{}' uses unknown token '{}'", key, c.token));
      }
      if (!(c.probability > 0.0) || !std::isfinite(c.probability)) {
        throw ValidationError(fmt::format("row '{}' has non-positive probability for '{}'", key,
                                          c.token));
      }
      sum += c.probability;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ValidationError(fmt::format("row '{}' sums to {} (expected 1)", key, sum));
    }
  }

  // Every history reachable from the start must resolve to a row.
  std::set<std::vector<std::string>> seen{{}};
  std::queue<std::vector<std::string>> frontier;
  frontier.push({});
  while (!frontier.empty()) {
    auto state = std::move(frontier.front());
    frontier.pop();
    const auto& r = row(state);
    for (const auto& c : r) {
      if (is_terminal(c.token)) continue;
      auto next = state;
      next.push_back(c.token);
      if (next.size() > window) next.erase(next.begin());
      if (seen.insert(next).second) frontier.push(std::move(next));
    }
  }
}

MockSpec MockSpec::from_json(const nlohmann::json& j) {
  MockSpec spec;
  try {
    spec.vocab = j.at("vocab").get<std::vector<std::string>>();
    spec.window = j.value("window", std::size_t{2});
    if (j.contains("terminals")) {
      for (const auto& t : j.at("terminals")) spec.terminals.insert(t.get<std::string>());
    }
    for (const auto& [key, row] : j.at("table").items()) {
      std::vector<Candidate> cands;
      for (const auto& [token, p] : row.items()) cands.push_back({token, p.get<double>()});
      sort_candidates(cands);
      spec.table.emplace(key, std::move(cands));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("malformed mock spec: {}", e.what()));
  }
  spec.validate();
  return spec;
}

MockSpec MockSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot read mock spec '{}'", path.string()));
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

nlohmann::ordered_json MockSpec::to_json() const {
  nlohmann::ordered_json j;
  j["vocab"] = vocab;
  j["window"] = window;
  j["terminals"] = std::vector<std::string>(terminals.begin(), terminals.end());
  nlohmann::ordered_json tab = nlohmann::ordered_json::object();
  for (const auto& [key, row] : table) {
    nlohmann::ordered_json r = nlohmann::ordered_json::object();
    for (const auto& c : row) r[c.token] = c.probability;
    tab[key] = std::move(r);
  }
  j["table"] = std::move(tab);
  return j;
}

MockModel::MockModel(MockSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

namespace {

const Candidate& sample(const std::vector<Candidate>& row, double temperature,
                        std::mt19937_64& rng) {
  if (temperature == 0.0) return row.front();
  double max_logit = -INFINITY;
  std::vector<double> w(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) {
    w[i] = std::log(row[i].probability) / temperature;
    max_logit = std::max(max_logit, w[i]);
  }
  double total = 0.0;
  for (double& x : w) {
    x = std::exp(x - max_logit);
    total += x;
  }
  const double u = unit_interval(rng()) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    acc += w[i];
    if (u < acc) return row[i];
  }
  return row.back();
}

}  // namespace

Completion MockModel::complete(const CompletionRequest& request, const DecodeParams& params) {
  params.validate();
  Completion out;
  out.prompt = request.text();
  std::vector<std::string> history = request.response_prefix;
  if (!history.empty() && spec_.is_terminal(history.back())) {
    out.finish_reason = "stop";
    return out;
  }
  std::mt19937_64 rng(mix_seed(params.seed, fnv1a64(out.prompt)));
  const auto visible = static_cast<std::size_t>(params.top_logprobs);
  for (int i = 1; i <= params.max_tokens; ++i) {
    const auto& row = spec_.row(history);
    const Candidate& chosen = sample(row, params.temperature, rng);
    TokenStep step;
    step.index = static_cast<std::size_t>(i);
    step.token = chosen.token;
    step.logprob = std::log(chosen.probability);
    step.candidates.assign(row.begin(), row.begin() + std::min(visible, row.size()));
    for (const auto& c : step.candidates) step.coverage += c.probability;
    out.text += step.token;
    history.push_back(step.token);
    out.steps.push_back(std::move(step));
    if (spec_.is_terminal(chosen.token)) {
      out.finish_reason = "stop";
      return out;
    }
  }
  out.finish_reason = "length";
  return out;
}

std::vector<std::string> MockModel::segment(std::string_view text) const {
  std::vector<std::string> tokens;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::string* best = nullptr;
    for (const auto& t : spec_.vocab) {
      if (text.compare(pos, t.size(), t) == 0 && (best == nullptr || t.size() > best->size())) {
        best = &t;
      }
    }
    if (best == nullptr) {
      throw ValidationError(fmt::format("mock cannot segment text at byte {}", pos));
    }
    tokens.push_back(*best);
    pos += best->size();
  }
  return tokens;
}

std::vector<double> MockModel::score(std::string_view /*prompt*/, std::string_view text) {
  std::vector<double> out;
  std::vector<std::string> history;
  for (auto& token : segment(text)) {
    const auto& row = spec_.row(history);
    double lp = -INFINITY;
    for (const auto& c : row) {
      if (c.token == token) lp = std::log(c.probability);
    }
    out.push_back(lp);
    history.push_back(std::move(token));
  }
  return out;
}

}  // namespace forkscope
