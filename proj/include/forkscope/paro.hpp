#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "forkscope/dataset.hpp"
#include "forkscope/gateway.hpp"
#include "forkscope/reward.hpp"

namespace forkscope {

// Step-wise reasoning guidance plus two worked exemplars for one task.
struct PatternPrior {
  Task task = Task::nsm;
  std::string instruction;
  std::vector<std::string> steps;
  std::vector<Record> exemplars;  // exactly two, each with a rationale

  // Throws ValidationError.
  void validate() const;
};

// Built-in priors: NSM has two steps (interpret both values, then compare
// along time/subject/scope/entity), TPC four (entity identification,
// direction, information matching, refined classification).
PatternPrior nsm_pattern_prior(std::vector<Record> exemplars);
PatternPrior tpc_pattern_prior(std::vector<Record> exemplars);

// {"task", "steps": [...], "exemplar_ids": [a, b], "instruction"}; exemplar
// ids are resolved against `exemplar_pool`.
PatternPrior load_pattern_prior(const std::filesystem::path& path,
                                const std::vector<Record>& exemplar_pool);
PatternPrior pattern_prior_from_json(const nlohmann::json& j,
                                     const std::vector<Record>& exemplar_pool);

inline constexpr std::string_view kRationaleDirective =
    "Please first provide your reasoning process in <rationale> and </rationale> tags, "
    "following these steps:";

// Instruction, tag directive, numbered steps, two exemplars, then the
// question. The record's gold answer is never part of the prompt.
std::string build_pattern_prompt(const PatternPrior& prior, std::string_view question);

// True when the question section of `prompt` carries `gold` in an answer slot.
bool prompt_leaks_answer(std::string_view prompt, std::string_view gold);

struct AnnotationConfig {
  int retries = 2;
  bool keep_on_mismatch = false;
  DecodeParams decode{0.7, 1024, 5, 0};

  void validate() const;
};

struct AnnotationOutcome {
  std::string id;
  bool kept = false;
  bool flagged = false;  // kept despite an answer mismatch
  int attempts = 0;
  std::string reason;    // empty on success

  bool operator==(const AnnotationOutcome&) const = default;
};

struct AnnotationResult {
  std::vector<Record> kept;               // input order
  std::vector<AnnotationOutcome> outcomes;  // one per input record, input order
  std::vector<AnnotationOutcome> rejects() const;
};

// Synthesizes a rationale per record and keeps it when the annotator's
// answer agrees with gold. Backend failures become rejects, not exceptions.
AnnotationResult annotate(const std::vector<Record>& records, const Gateway& gateway,
                          const PatternPrior& prior, const AnnotationConfig& config,
                          const ExtractionRule& rule);

enum class CorruptionMode { deterministic, llm };

CorruptionMode parse_corruption_mode(std::string_view name);

struct CorruptionPlan {
  double fraction = 0.25;
  CorruptionMode mode = CorruptionMode::deterministic;
  std::uint64_t seed = 0;
  int retries = 2;
  DecodeParams decode{0.7, 1024, 5, 0};

  void validate() const;
};

struct CorruptionResult {
  std::vector<Record> records;         // input order, selected ones rewritten
  std::set<std::string> selected_ids;  // floor(fraction * N) ids
  std::vector<AnnotationOutcome> rejects;
};

// Indices chosen by a seeded Fisher-Yates shuffle; first floor(f*N) win.
std::vector<std::size_t> select_for_corruption(std::size_t count, double fraction,
                                               std::uint64_t seed);

// Flips the terminal yes/no verdict of an NSM rationale and appends a
// sentence concluding the opposite of `gold`.
std::string flip_nsm_rationale(std::string_view rationale, std::string_view gold);

std::string build_corruption_prompt(std::string_view question, std::string_view answer);

CorruptionResult corrupt(const std::vector<Record>& records, const CorruptionPlan& plan,
                         const Gateway* gateway, const ExtractionRule& rule);

inline constexpr std::string_view kHintCaveat =
    "Please note that this sample provides manually annotated hints before the Output. "
    "You may refer to the Hint content, but be aware that the Hint may not be complete.";

std::string default_task_instruction(Task task);

// "# Task Instructions" / "# Input" / "# Hint" / "# Output" layout.
std::string build_hint_prompt(std::string_view question, std::string_view rationale,
                              std::string_view instruction = default_task_instruction(Task::nsm));

// Same layout without the hint section; used to elicit responses for detection
// and evaluation.
std::string build_task_prompt(std::string_view question,
                              std::string_view instruction = default_task_instruction(Task::nsm));

}  // namespace forkscope
