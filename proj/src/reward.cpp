#include "forkscope/reward.hpp"

#include <cctype>

#include <fmt/format.h>

#include "forkscope/error.hpp"
#include "forkscope/util.hpp"

namespace forkscope {
namespace {

std::optional<std::string> last_answer_tag(std::string_view text) {
  const auto open = text.rfind(kAnswerOpen);
  if (open == std::string_view::npos) return std::nullopt;
  const auto body = open + kAnswerOpen.size();
  const auto close = text.find(kAnswerClose, body);
  if (close == std::string_view::npos) return std::nullopt;
  return trim(text.substr(body, close - body));
}

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_';
}

std::optional<std::string> last_yes_no(std::string_view text) {
  std::optional<std::string> found;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_word_char(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_word_char(text[j])) ++j;
    if (j - i == 2 || j - i == 3) {
      std::string word = to_lower(text.substr(i, j - i));
      if (word == "yes" || word == "no") found = std::move(word);
    }
    i = j;
  }
  return found;
}

std::optional<std::string> extract_nsm(std::string_view text) {
  if (auto tagged = last_answer_tag(text)) {
    std::string label = to_lower(*tagged);
    if (label == "yes" || label == "no") return label;
  }
  std::string_view region = text;
  if (auto close = text.rfind(kRationaleClose); close != std::string_view::npos) {
    region = text.substr(close + kRationaleClose.size());
  }
  return last_yes_no(region);
}

std::optional<std::string> extract_tpc(std::string_view text, const Taxonomy& taxonomy) {
  if (auto tagged = last_answer_tag(text); tagged && taxonomy.contains(*tagged)) {
    return tagged;
  }
  std::optional<std::string> label_line;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string line = trim(text.substr(pos, eol - pos));
    if (line.starts_with("Label:")) label_line = trim(std::string_view(line).substr(6));
    pos = eol + 1;
  }
  if (label_line && taxonomy.contains(*label_line)) return label_line;

  std::optional<std::string> best;
  std::size_t best_pos = 0;
  for (const auto& label : taxonomy.labels()) {
    const auto at = text.rfind(label);
    if (at == std::string_view::npos) continue;
    if (!best || at > best_pos || (at == best_pos && label.size() > best->size())) {
      best = label;
      best_pos = at;
    }
  }
  return best;
}

}  // namespace

std::optional<std::string> extract(std::string_view response, const ExtractionRule& rule) {
  if (rule.task() == Task::nsm) return extract_nsm(response);
  if (rule.taxonomy() == nullptr) throw ValidationError("tpc extraction needs a taxonomy");
  return extract_tpc(response, *rule.taxonomy());
}

bool labels_equal(std::string_view a, std::string_view b, Task task) {
  if (task == Task::nsm) return to_lower(trim(a)) == to_lower(trim(b));
  return trim(a) == trim(b);
}

int verify(std::string_view response, std::string_view gold, const ExtractionRule& rule) {
  auto label = extract(response, rule);
  return label && labels_equal(*label, gold, rule.task()) ? 1 : 0;
}

double kl_estimate(std::span<const double> policy_logprobs,
                   std::span<const double> reference_logprobs) {
  if (policy_logprobs.size() != reference_logprobs.size()) {
    throw ValidationError(fmt::format("kl_estimate: {} policy vs {} reference logprobs",
                                      policy_logprobs.size(), reference_logprobs.size()));
  }
  double sum = 0.0;
  for (std::size_t t = 0; t < policy_logprobs.size(); ++t) {
    sum += policy_logprobs[t] - reference_logprobs[t];
  }
  return sum;
}

double rlvr_reward(std::string_view response, std::string_view gold,
                   std::span<const double> policy_logprobs,
                   std::span<const double> reference_logprobs, const RewardConfig& config,
                   const ExtractionRule& rule) {
  if (!(config.beta >= 0.0)) throw ValidationError("beta must be >= 0");
  const double kl = kl_estimate(policy_logprobs, reference_logprobs);
  const double v = verify(response, gold, rule);
  if (config.beta == 0.0) return v;
  return v - config.beta * kl;
}

double f1_score(double precision, double recall) {
  if (precision + recall <= 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

MetricSummary pair_metrics(const EvalSets& sets) {
  MetricSummary m;
  m.gold_count = sets.gold.size();
  m.predicted_count = sets.predicted.size();
  for (const auto& id : sets.predicted) {
    if (sets.gold.count(id)) ++m.overlap_count;
  }
  const auto overlap = static_cast<double>(m.overlap_count);
  if (m.predicted_count == 0) {
    m.precision_undefined = true;
  } else {
    m.precision = overlap / static_cast<double>(m.predicted_count);
  }
  if (m.gold_count == 0) {
    m.recall_undefined = true;
  } else {
    m.recall = overlap / static_cast<double>(m.gold_count);
  }
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

double accuracy(std::span<const std::pair<std::optional<std::string>, std::string>> rows,
                Task task) {
  if (rows.empty()) throw ValidationError("accuracy over an empty prediction list");
  std::size_t correct = 0;
  for (const auto& [pred, gold] : rows) {
    if (pred && labels_equal(*pred, gold, task)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(rows.size());
}

nlohmann::ordered_json to_json(const MetricSummary& m) {
  nlohmann::ordered_json j;
  j["accuracy"] = m.accuracy;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["f1"] = m.f1;
  j["gold_count"] = m.gold_count;
  j["predicted_count"] = m.predicted_count;
  j["overlap_count"] = m.overlap_count;
  j["precision_undefined"] = m.precision_undefined;
  j["recall_undefined"] = m.recall_undefined;
  return j;
}

}  // namespace forkscope
