#include "forkscope/paro.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

#include <fmt/format.h>

#include "forkscope/error.hpp"
#include "forkscope/util.hpp"

namespace forkscope {

std::string default_task_instruction(Task task) {
  if (task == Task::nsm) {
    return "Given two numerical mentions, Value 1 and Value 2, together with their contexts, "
           "determine whether they refer to the same underlying numerical fact. If they are "
           "semantically equivalent, please output \"yes\", otherwise please output \"no\".";
  }
  return "Please classify the purpose of the given bank transaction into one of the "
         "predefined categories.";
}

void PatternPrior::validate() const {
  if (instruction.empty()) throw ValidationError("pattern prior has no instruction");
  if (steps.empty()) throw ValidationError("pattern prior has no reasoning steps");
  for (const auto& s : steps) {
    if (trim(s).empty()) throw ValidationError("pattern prior has an empty step");
  }
  if (exemplars.size() != 2) {
    throw ValidationError(
        fmt::format("pattern prior needs exactly 2 exemplars (got {})", exemplars.size()));
  }
  for (const auto& e : exemplars) {
    if (e.task != task) {
      throw ValidationError(fmt::format("exemplar '{}' belongs to task {}, prior is {}", e.id,
                                        to_string(e.task), to_string(task)));
    }
    if (!e.rationale) throw ValidationError(fmt::format("exemplar '{}' has no rationale", e.id));
  }
}

PatternPrior nsm_pattern_prior(std::vector<Record> exemplars) {
  PatternPrior prior;
  prior.task = Task::nsm;
  prior.instruction = default_task_instruction(Task::nsm);
  prior.steps = {
      "Analyze the semantics of Value 1 and Value 2.",
      "Compare the similarities and differences between their semantics in terms of time, "
      "subject, scope, entity, etc. If there is a difference in any aspect, then the output "
      "should be \"no\", otherwise output \"yes\".",
  };
  prior.exemplars = std::move(exemplars);
  prior.validate();
  return prior;
}

PatternPrior tpc_pattern_prior(std::vector<Record> exemplars) {
  PatternPrior prior;
  prior.task = Task::tpc;
  prior.instruction = default_task_instruction(Task::tpc);
  prior.steps = {
      "Entity Identification: Determine whether the account holder is an enterprise "
      "(e.g., company, corporation) or an individual (personal name).",
      "Direction Determination: Identify the transaction direction, i.e. whether it represents "
      "income (credit) or expense (debit).",
      "Information Matching: Prioritize transaction keyword matching, then analyze the "
      "counterparty information:\n"
      "   - Financial institutions -> investment / wealth management / loan categories\n"
      "   - Tax authorities -> tax-related categories\n"
      "   - Judicial authorities -> penalty / compensation categories\n"
      "   - Government departments -> subsidy / tax-related categories",
      "Refined Classification: Combine the subject type and transaction nature to select the "
      "most appropriate purpose category.",
  };
  prior.exemplars = std::move(exemplars);
  prior.validate();
  return prior;
}

PatternPrior pattern_prior_from_json(const nlohmann::json& j,
                                     const std::vector<Record>& exemplar_pool) {
  PatternPrior prior;
  try {
    prior.task = parse_task(j.at("task").get<std::string>());
    prior.steps = j.at("steps").get<std::vector<std::string>>();
    prior.instruction = j.at("instruction").get<std::string>();
    const auto ids = j.at("exemplar_ids").get<std::vector<std::string>>();
    if (ids.size() != 2) {
      throw ValidationError(fmt::format("exemplar_ids must list 2 ids (got {})", ids.size()));
    }
    for (const auto& id : ids) {
      auto it = std::find_if(exemplar_pool.begin(), exemplar_pool.end(),
                             [&](const Record& r) { return r.id == id; });
      if (it == exemplar_pool.end()) {
        throw ValidationError(fmt::format("exemplar '{}' not found", id));
      }
      prior.exemplars.push_back(*it);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("malformed pattern prior: {}", e.what()));
  }
  prior.validate();
  return prior;
}

PatternPrior load_pattern_prior(const std::filesystem::path& path,
                                const std::vector<Record>& exemplar_pool) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot read pattern prior '{}'", path.string()));
  try {
    return pattern_prior_from_json(nlohmann::json::parse(in), exemplar_pool);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

namespace {

constexpr std::string_view kQuestionHeader = "# Question\n";

}  // namespace

std::string build_pattern_prompt(const PatternPrior& prior, std::string_view question) {
  prior.validate();
  std::string out = prior.instruction;
  out += ' ';
  out += kRationaleDirective;
  out += '\n';
  for (std::size_t i = 0; i < prior.steps.size(); ++i) {
    out += fmt::format("{}. {}\n", i + 1, prior.steps[i]);
  }
  out += "Please follow the format below for output and do not output any other content:\n";
  for (std::size_t i = 0; i < prior.exemplars.size(); ++i) {
    const auto& e = prior.exemplars[i];
    out += fmt::format("\n# Example {}\n## Question\n{}\n## Output\n{}\n", i + 1, e.question,
                       assemble_target(e.rationale->text, e.answer));
  }
  out += '\n';
  out += kQuestionHeader;
  out += question;
  out += "\n\n# Output\n";
  return out;
}

bool prompt_leaks_answer(std::string_view prompt, std::string_view gold) {
  auto at = prompt.rfind(kQuestionHeader);
  std::string section = to_lower(at == std::string_view::npos ? prompt : prompt.substr(at));
  const std::string g = to_lower(trim(gold));
  for (const auto& slot : {std::string(kAnswerOpen) + g, "answer: " + g, "answer:" + g,
                           "label: " + g, "label:" + g}) {
    if (section.find(slot) != std::string::npos) return true;
  }
  return false;
}

void AnnotationConfig::validate() const {
  if (retries < 0) throw ValidationError("annotation retries must be >= 0");
  decode.validate();
}

std::vector<AnnotationOutcome> AnnotationResult::rejects() const {
  std::vector<AnnotationOutcome> out;
  for (const auto& o : outcomes) {
    if (!o.kept || o.flagged) out.push_back(o);
  }
  return out;
}

AnnotationResult annotate(const std::vector<Record>& records, const Gateway& gateway,
                          const PatternPrior& prior, const AnnotationConfig& config,
                          const ExtractionRule& rule) {
  config.validate();
  prior.validate();
  for (const auto& r : records) {
    if (r.task != prior.task) {
      throw ValidationError(fmt::format("record '{}' is {} but the prior is {}", r.id,
                                        to_string(r.task), to_string(prior.task)));
    }
  }

  std::vector<std::optional<Record>> kept(records.size());
  std::vector<AnnotationOutcome> outcomes(records.size());
  auto errors = gateway.for_each_index(records.size(), [&](std::size_t i) {
    const Record& record = records[i];
    AnnotationOutcome& outcome = outcomes[i];
    outcome.id = record.id;
    const std::string prompt = build_pattern_prompt(prior, record.question);
    std::optional<std::string> mismatched_rationale;
    for (int attempt = 0; attempt <= config.retries; ++attempt) {
      outcome.attempts = attempt + 1;
      DecodeParams params = config.decode;
      params.seed = mix_seed(mix_seed(config.decode.seed, fnv1a64(record.id)),
                             static_cast<std::uint64_t>(attempt));
      Completion completion;
      try {
        completion = gateway.generate(prompt, params);
      } catch (const BackendError& e) {
        outcome.reason = fmt::format("backend-error: {}", e.what());
        return;
      }
      TargetParts parts;
      try {
        parts = parse_target(completion.text);
      } catch (const ValidationError&) {
        outcome.reason = "malformed-output";
        continue;
      }
      if (trim(parts.rationale).empty()) {
        outcome.reason = "malformed-output";
        continue;
      }
      const auto label = extract(completion.text, rule);
      if (label && labels_equal(*label, record.answer, rule.task())) {
        Record out = record;
        out.rationale = Rationale{parts.rationale, Provenance::paro};
        kept[i] = std::move(out);
        outcome.kept = true;
        outcome.reason.clear();
        return;
      }
      outcome.reason = "answer-mismatch";
      mismatched_rationale = parts.rationale;
    }
    if (config.keep_on_mismatch && mismatched_rationale) {
      Record out = record;
      out.rationale = Rationale{*mismatched_rationale, Provenance::paro};
      kept[i] = std::move(out);
      outcome.kept = true;
      outcome.flagged = true;
    }
  });
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AnnotationResult result;
  result.outcomes = std::move(outcomes);
  for (auto& k : kept) {
    if (k) result.kept.push_back(std::move(*k));
  }
  return result;
}

CorruptionMode parse_corruption_mode(std::string_view name) {
  if (name == "deterministic") return CorruptionMode::deterministic;
  if (name == "llm") return CorruptionMode::llm;
  throw ValidationError(fmt::format("unknown corruption mode '{}'", name));
}

void CorruptionPlan::validate() const {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ValidationError(fmt::format("corruption fraction must lie in [0, 1] (got {})", fraction));
  }
  if (retries < 0) throw ValidationError("corruption retries must be >= 0");
  decode.validate();
}

std::vector<std::size_t> select_for_corruption(std::size_t count, double fraction,
                                               std::uint64_t seed) {
  // The epsilon keeps products like 0.29 * 100 from flooring to 28.
  const auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(count) + 1e-9));
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = count; i > 1; --i) {
    const auto j = static_cast<std::size_t>((static_cast<unsigned __int128>(rng()) * i) >> 64);
    std::swap(order[i - 1], order[j]);
  }
  order.resize(std::min(take, count));
  std::sort(order.begin(), order.end());
  return order;
}

namespace {

std::string match_case(std::string_view like, std::string_view word) {
  std::string out(word);
  const bool all_upper = std::all_of(like.begin(), like.end(), [](unsigned char c) {
    return std::isupper(c) != 0;
  });
  if (all_upper && like.size() > 1) {
    for (char& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  } else if (!like.empty() && std::isupper(static_cast<unsigned char>(like.front()))) {
    out.front() = static_cast<char>(std::toupper(static_cast<unsigned char>(out.front())));
  }
  return out;
}

}  // namespace

std::string flip_nsm_rationale(std::string_view rationale, std::string_view gold) {
  const std::string g = to_lower(trim(gold));
  if (g != "yes" && g != "no") {
    throw ValidationError(fmt::format("cannot flip nsm verdict '{}'", gold));
  }
  const std::string flipped = g == "yes" ? "no" : "yes";
  std::string out(rationale);

  auto word_char = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_'; };
  std::size_t last_begin = std::string::npos;
  std::size_t last_len = 0;
  for (std::size_t i = 0; i < out.size();) {
    if (!word_char(out[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < out.size() && word_char(out[j])) ++j;
    const std::string w = to_lower(std::string_view(out).substr(i, j - i));
    if (w == "yes" || w == "no") {
      last_begin = i;
      last_len = j - i;
    }
    i = j;
  }
  if (last_begin != std::string::npos) {
    out.replace(last_begin, last_len,
                match_case(std::string_view(rationale).substr(last_begin, last_len), flipped));
  }
  if (!out.empty() && std::isspace(static_cast<unsigned char>(out.back())) == 0) out += ' ';
  out += fmt::format("Therefore, the answer is {}.", flipped);
  return out;
}

std::string build_corruption_prompt(std::string_view question, std::string_view answer) {
  return fmt::format(
      "# Task Instructions\n"
      "Given a Question and an Answer, please output a Modified Answer that transforms the "
      "Answer into an incorrect response.\n"
      "\n"
      "Requirements:\n"
      "- Ensure that the final answer in Modified Answer is different from the original Answer.\n"
      "- If the Answer's final conclusion is \"yes\", then the Modified Answer's final "
      "conclusion should be \"no\", and vice versa.\n"
      "- Output the Modified Answer directly without additional explanations.\n"
      "\n"
      "# Question\n{}\n\n# Answer\n{}\n\n# Modified Answer\n",
      question, answer);
}

CorruptionResult corrupt(const std::vector<Record>& records, const CorruptionPlan& plan,
                         const Gateway* gateway, const ExtractionRule& rule) {
  plan.validate();
  if (plan.mode == CorruptionMode::llm && gateway == nullptr) {
    throw ValidationError("llm corruption mode needs a model endpoint");
  }
  for (const auto& r : records) {
    if (!r.rationale) throw ValidationError(fmt::format("record '{}' has no rationale", r.id));
    if (plan.mode == CorruptionMode::deterministic && r.task != Task::nsm) {
      throw ValidationError("deterministic corruption supports nsm records only");
    }
  }

  CorruptionResult result;
  result.records = records;
  const auto selected = select_for_corruption(records.size(), plan.fraction, plan.seed);
  for (auto idx : selected) result.selected_ids.insert(records[idx].id);

  if (plan.mode == CorruptionMode::deterministic) {
    for (auto idx : selected) {
      auto& r = result.records[idx];
      r.rationale = Rationale{flip_nsm_rationale(r.rationale->text, r.answer), Provenance::corrupted};
    }
    return result;
  }

  std::vector<std::optional<AnnotationOutcome>> failures(selected.size());
  auto errors = gateway->for_each_index(selected.size(), [&](std::size_t s) {
    Record& r = result.records[selected[s]];
    const std::string prompt =
        build_corruption_prompt(r.question, assemble_target(r.rationale->text, r.answer));
    AnnotationOutcome outcome{r.id, false, false, 0, "flip-unverified"};
    for (int attempt = 0; attempt <= plan.retries; ++attempt) {
      outcome.attempts = attempt + 1;
      DecodeParams params = plan.decode;
      params.seed = mix_seed(mix_seed(plan.seed, fnv1a64(r.id)), static_cast<std::uint64_t>(attempt));
      std::string text;
      try {
        text = gateway->generate(prompt, params).text;
      } catch (const BackendError& e) {
        outcome.reason = fmt::format("backend-error: {}", e.what());
        break;
      }
      std::string rewritten;
      try {
        rewritten = parse_target(text).rationale;
      } catch (const ValidationError&) {
        rewritten = trim(text);
      }
      const auto label = extract(rewritten, rule);
      if (!rewritten.empty() && label && !labels_equal(*label, r.answer, rule.task())) {
        r.rationale = Rationale{rewritten, Provenance::corrupted};
        return;
      }
    }
    failures[s] = outcome;
  });
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (auto& f : failures) {
    if (f) result.rejects.push_back(std::move(*f));
  }
  return result;
}

std::string build_hint_prompt(std::string_view question, std::string_view rationale,
                              std::string_view instruction) {
  if (trim(question).empty()) throw ValidationError("hint prompt needs a question");
  if (rationale.empty()) throw ValidationError("hint prompt needs a non-empty rationale");
  return fmt::format("# Task Instructions\n{}\n{}\n\n# Input\n{}\n\n# Hint\n{}\n\n# Output\n",
                     instruction, kHintCaveat, question, rationale);
}

std::string build_task_prompt(std::string_view question, std::string_view instruction) {
  if (trim(question).empty()) throw ValidationError("task prompt needs a question");
  return fmt::format("# Task Instructions\n{}\n\n# Input\n{}\n\n# Output\n", instruction,
                     question);
}

}  // namespace forkscope
