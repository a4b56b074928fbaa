#include "forkscope/rftd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "forkscope/error.hpp"
#include "forkscope/util.hpp"

namespace forkscope {

std::string_view to_string(EntropyMode mode) {
  return mode == EntropyMode::renormalized ? "renormalized" : "residual_bucket";
}

EntropyMode parse_entropy_mode(std::string_view name) {
  if (name == "renormalized") return EntropyMode::renormalized;
  if (name == "residual_bucket") return EntropyMode::residual_bucket;
  throw ValidationError(fmt::format("unknown entropy mode '{}'", name));
}

double entropy(const TokenStep& step, EntropyMode mode) {
  if (step.candidates.empty()) {
    throw ValidationError(fmt::format("step {} has no candidates", step.index));
  }
  std::vector<double> probs;
  probs.reserve(step.candidates.size() + 1);
  double visible = 0.0;
  for (const auto& c : step.candidates) {
    if (!(c.probability > 0.0) || !std::isfinite(c.probability)) {
      throw ValidationError(fmt::format("step {}: candidate '{}' has probability {}", step.index,
                                        c.token, c.probability));
    }
    probs.push_back(c.probability);
    visible += c.probability;
  }
  if (mode == EntropyMode::residual_bucket && visible < 1.0 - 1e-6) {
    probs.push_back(1.0 - visible);
  }
  const double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  double h = 0.0;
  for (double p : probs) {
    const double q = p / total;
    h -= q * std::log(q);
  }
  return std::max(h, 0.0);
}

void RftdConfig::validate() const {
  if (k < 1 || m < 1 || n < 1) {
    throw ValidationError(fmt::format("k, m and n must be >= 1 (got k={}, m={}, n={})", k, m, n));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ValidationError(fmt::format("alpha must lie in [0, 1] (got {})", alpha));
  }
  rollout.validate();
}

nlohmann::ordered_json to_json(const RftdConfig& c) {
  nlohmann::ordered_json j;
  j["k"] = c.k;
  j["m"] = c.m;
  j["n"] = c.n;
  j["alpha"] = c.alpha;
  j["entropy_mode"] = to_string(c.entropy_mode);
  j["rollout"] = to_json(c.rollout);
  return j;
}

std::string RftdConfig::hash() const { return hex64(fnv1a64(to_json(*this).dump())); }

RftdConfig rftd_config_from_json(const nlohmann::json& j, RftdConfig c) {
  try {
    if (j.contains("k")) c.k = j.at("k").get<std::size_t>();
    if (j.contains("m")) c.m = j.at("m").get<std::size_t>();
    if (j.contains("n")) c.n = j.at("n").get<std::size_t>();
    if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
    if (j.contains("entropy_mode")) {
      c.entropy_mode = parse_entropy_mode(j.at("entropy_mode").get<std::string>());
    }
    if (j.contains("rollout")) c.rollout = decode_params_from_json(j.at("rollout"), c.rollout);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("rftd config: {}", e.what()));
  }
  c.validate();
  return c;
}

std::vector<PositionEntropy> top_k_positions(const Completion& response, std::size_t k,
                                             EntropyMode mode) {
  if (response.steps.empty()) throw ValidationError("response has no tokens");
  std::vector<PositionEntropy> all;
  all.reserve(response.steps.size());
  for (std::size_t i = 0; i < response.steps.size(); ++i) {
    all.push_back({i + 1, response.steps[i].token, entropy(response.steps[i], mode)});
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.entropy > b.entropy;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

std::vector<std::string> top_m_substitutes(const TokenStep& step, std::size_t m) {
  auto ranked = step.candidates;
  sort_candidates(ranked);
  std::vector<std::string> out;
  for (const auto& c : ranked) {
    if (out.size() >= m) break;
    if (c.token != step.token) out.push_back(c.token);
  }
  return out;
}

int divergent(const std::optional<std::string>& continuation_answer,
              const std::optional<std::string>& original_answer, Task task) {
  if (!original_answer) throw ValidationError("divergence needs a parseable original answer");
  if (!continuation_answer) return 1;
  return labels_equal(*continuation_answer, *original_answer, task) ? 0 : 1;
}

SubstituteTrial divergence_rate(const DetectionContext& ctx, std::string_view task_prompt,
                                const Completion& response, std::size_t position,
                                std::string_view substitute, const std::string& original_answer,
                                std::uint64_t trial_seed) {
  if (position < 1 || position > response.steps.size()) {
    throw ValidationError(fmt::format("position {} outside response of length {}", position,
                                      response.steps.size()));
  }
  if (response.steps[position - 1].token == substitute) {
    throw ValidationError(fmt::format("substitute at position {} equals the original token",
                                      position));
  }
  CompletionRequest request;
  request.prompt = std::string(task_prompt);
  for (std::size_t i = 0; i + 1 < position; ++i) {
    request.response_prefix.push_back(response.steps[i].token);
  }
  request.response_prefix.emplace_back(substitute);

  DecodeParams params = ctx.config.rollout;
  params.seed = trial_seed;
  const auto continuations = ctx.gateway.continue_n(request, ctx.config.n, params);

  const std::string prefix_text = request.prefix_text();
  const std::optional<std::string> original{original_answer};
  SubstituteTrial trial;
  trial.position = position;
  trial.substitute = std::string(substitute);
  for (const auto& c : continuations) {
    RolloutSummary s;
    s.answer = extract(prefix_text + c.text, ctx.rule);
    s.divergent = divergent(s.answer, original, ctx.rule.task()) == 1;
    s.finish_reason = c.finish_reason;
    s.token_count = c.steps.size();
    if (!s.answer) ++trial.unparseable_count;
    if (s.divergent) ++trial.divergent_count;
    trial.rollouts.push_back(std::move(s));
  }
  trial.rho = static_cast<double>(trial.divergent_count) / static_cast<double>(ctx.config.n);
  return trial;
}

std::vector<PositionEntropy> forking_set(const std::vector<PositionEntropy>& candidates,
                                         const std::vector<SubstituteTrial>& trials,
                                         double alpha) {
  std::vector<PositionEntropy> out;
  for (const auto& cand : candidates) {
    std::optional<double> max_rho;
    for (const auto& t : trials) {
      if (t.position == cand.position) max_rho = std::max(max_rho.value_or(0.0), t.rho);
    }
    if (max_rho && *max_rho > alpha) out.push_back(cand);
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.position < b.position; });
  return out;
}

DetectionResult detect_forking(const DetectionContext& ctx, std::string_view task_prompt,
                               const Completion& response, std::string id) {
  ctx.config.validate();
  const auto original = extract(response.text, ctx.rule);
  if (!original) {
    throw ValidationError(fmt::format("response '{}' has no parseable final answer", id));
  }

  DetectionResult result;
  result.id = std::move(id);
  result.config_hash = ctx.config.hash();
  result.endpoint = ctx.gateway.describe();
  result.original_answer = *original;
  result.response_text = response.text;
  result.entropy_mode = ctx.config.entropy_mode;
  result.alpha = ctx.config.alpha;
  result.candidates = top_k_positions(response, ctx.config.k, ctx.config.entropy_mode);

  struct Planned {
    std::size_t position;
    std::size_t index;
    std::string substitute;
  };
  std::vector<Planned> plan;
  for (const auto& cand : result.candidates) {
    const auto subs = top_m_substitutes(response.steps[cand.position - 1], ctx.config.m);
    if (subs.empty()) {
      spdlog::debug("position {} has a single candidate; skipped", cand.position);
      result.skipped.push_back(cand.position);
      continue;
    }
    for (std::size_t j = 0; j < subs.size(); ++j) plan.push_back({cand.position, j, subs[j]});
  }

  result.trials.resize(plan.size());
  auto errors = ctx.gateway.for_each_index(plan.size(), [&](std::size_t i) {
    const auto& p = plan[i];
    const auto seed = mix_seed(mix_seed(ctx.config.rollout.seed, p.position), p.index);
    result.trials[i] = divergence_rate(ctx, task_prompt, response, p.position, p.substitute,
                                       *original, seed);
    result.trials[i].substitute_index = p.index;
  });
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  result.forking = forking_set(result.candidates, result.trials, ctx.config.alpha);
  return result;
}

namespace {

nlohmann::ordered_json position_json(const PositionEntropy& p) {
  return {{"position", p.position}, {"token", p.token}, {"entropy", p.entropy}};
}

PositionEntropy position_from_json(const nlohmann::json& j) {
  return {j.at("position").get<std::size_t>(), j.at("token").get<std::string>(),
          j.at("entropy").get<double>()};
}

}  // namespace

nlohmann::ordered_json to_json(const DetectionResult& r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  j["config_hash"] = r.config_hash;
  j["endpoint"] = r.endpoint;
  j["entropy_mode"] = to_string(r.entropy_mode);
  j["alpha"] = r.alpha;
  j["original_answer"] = r.original_answer;
  j["response_text"] = r.response_text;
  auto cands = nlohmann::ordered_json::array();
  for (const auto& c : r.candidates) cands.push_back(position_json(c));
  j["candidates"] = std::move(cands);
  j["skipped"] = r.skipped;
  auto trials = nlohmann::ordered_json::array();
  for (const auto& t : r.trials) {
    nlohmann::ordered_json tj;
    tj["position"] = t.position;
    tj["substitute_index"] = t.substitute_index;
    tj["substitute"] = t.substitute;
    tj["n"] = t.rollouts.size();
    tj["rho"] = t.rho;
    tj["divergent_count"] = t.divergent_count;
    tj["unparseable_count"] = t.unparseable_count;
    auto rollouts = nlohmann::ordered_json::array();
    for (const auto& s : t.rollouts) {
      rollouts.push_back({{"answer", s.answer ? nlohmann::ordered_json(*s.answer) : nullptr},
                          {"divergent", s.divergent},
                          {"finish_reason", s.finish_reason},
                          {"tokens", s.token_count}});
    }
    tj["rollouts"] = std::move(rollouts);
    trials.push_back(std::move(tj));
  }
  j["trials"] = std::move(trials);
  auto forking = nlohmann::ordered_json::array();
  for (const auto& f : r.forking) forking.push_back(position_json(f));
  j["forking"] = std::move(forking);
  return j;
}

DetectionResult detection_from_json(const nlohmann::json& j) {
  try {
    DetectionResult r;
    r.id = j.at("id").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.endpoint = j.value("endpoint", std::string{});
    r.entropy_mode = parse_entropy_mode(j.at("entropy_mode").get<std::string>());
    r.alpha = j.at("alpha").get<double>();
    r.original_answer = j.at("original_answer").get<std::string>();
    r.response_text = j.at("response_text").get<std::string>();
    for (const auto& c : j.at("candidates")) r.candidates.push_back(position_from_json(c));
    r.skipped = j.at("skipped").get<std::vector<std::size_t>>();
    for (const auto& tj : j.at("trials")) {
      SubstituteTrial t;
      t.position = tj.at("position").get<std::size_t>();
      t.substitute_index = tj.at("substitute_index").get<std::size_t>();
      t.substitute = tj.at("substitute").get<std::string>();
      t.rho = tj.at("rho").get<double>();
      t.divergent_count = tj.at("divergent_count").get<std::size_t>();
      t.unparseable_count = tj.at("unparseable_count").get<std::size_t>();
      for (const auto& sj : tj.at("rollouts")) {
        RolloutSummary s;
        if (!sj.at("answer").is_null()) s.answer = sj.at("answer").get<std::string>();
        s.divergent = sj.at("divergent").get<bool>();
        s.finish_reason = sj.at("finish_reason").get<std::string>();
        s.token_count = sj.at("tokens").get<std::size_t>();
        t.rollouts.push_back(std::move(s));
      }
      r.trials.push_back(std::move(t));
    }
    for (const auto& f : j.at("forking")) r.forking.push_back(position_from_json(f));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("malformed detection result: {}", e.what()));
  }
}

namespace {

class OracleWalk {
 public:
  OracleWalk(const MockSpec& spec, const ExtractionRule& rule, const std::string& original,
             double temperature, std::size_t depth_bound, std::size_t node_budget)
      : spec_(spec),
        rule_(rule),
        original_(original),
        temperature_(temperature),
        depth_bound_(depth_bound),
        node_budget_(node_budget) {}

  void visit(std::vector<std::string>& history, double mass, std::size_t depth) {
    if (++result.nodes > node_budget_) {
      throw ValidationError(fmt::format("exact_divergence exceeded node budget {}", node_budget_));
    }
    if (!history.empty() && spec_.is_terminal(history.back())) {
      std::string text;
      for (const auto& t : history) text += t;
      if (divergent(extract(text, rule_), original_, rule_.task()) == 1) {
        result.divergent_mass += mass;
      }
      return;
    }
    if (depth == depth_bound_) {
      result.unterminated_mass += mass;
      return;
    }
    const auto& row = spec_.row(history);
    for (const auto& [token, weight] : branch_weights(row)) {
      history.push_back(token);
      visit(history, mass * weight, depth + 1);
      history.pop_back();
    }
  }

  ExactDivergence result;

 private:
  // p^(1/T) / sum p^(1/T); T = 0 keeps only the greedy choice.
  std::vector<std::pair<std::string, double>> branch_weights(const std::vector<Candidate>& row) const {
    if (temperature_ == 0.0) {
      const auto best = std::min_element(row.begin(), row.end(), [](const auto& a, const auto& b) {
        return a.probability != b.probability ? a.probability > b.probability : a.token < b.token;
      });
      return {{best->token, 1.0}};
    }
    std::vector<std::pair<std::string, double>> out;
    double z = 0.0;
    for (const auto& c : row) {
      const double w = std::pow(c.probability, 1.0 / temperature_);
      out.emplace_back(c.token, w);
      z += w;
    }
    for (auto& [token, w] : out) w /= z;
    return out;
  }

  const MockSpec& spec_;
  const ExtractionRule& rule_;
  std::optional<std::string> original_;
  double temperature_;
  std::size_t depth_bound_;
  std::size_t node_budget_;
};

}  // namespace

ExactDivergence exact_divergence(const MockSpec& spec, const std::vector<std::string>& prefix,
                                 std::string_view substitute, const ExtractionRule& rule,
                                 const std::string& original_answer, double temperature,
                                 std::size_t depth_bound, std::size_t node_budget) {
  if (temperature < 0.0) throw ValidationError("temperature must be >= 0");
  OracleWalk walk(spec, rule, original_answer, temperature, depth_bound, node_budget);
  std::vector<std::string> history = prefix;
  history.emplace_back(substitute);
  walk.visit(history, 1.0, 0);
  return walk.result;
}

}  // namespace forkscope
