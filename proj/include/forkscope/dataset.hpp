#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace forkscope {

enum class Task { nsm, tpc };

std::string_view to_string(Task task);
Task parse_task(std::string_view name);

enum class Provenance { human, paro, distill, corrupted };

std::string_view to_string(Provenance p);
Provenance parse_provenance(std::string_view name);

struct Rationale {
  std::string text;
  Provenance provenance = Provenance::human;

  bool operator==(const Rationale&) const = default;
};

// A (question, answer) pair, optionally carrying a rationale. Records without
// a rationale are the plain QA corpus; records with one are the rationale
// corpus used for SFT targets, exemplars and hints.
struct Record {
  std::string id;
  Task task = Task::nsm;
  std::string question;
  std::string answer;
  std::optional<Rationale> rationale;

  bool operator==(const Record&) const = default;
};

enum class LabelGroup { corporate, personal };

class Taxonomy {
 public:
  Taxonomy() = default;
  // Throws ValidationError on duplicate or empty labels.
  explicit Taxonomy(std::vector<std::string> labels);

  static Taxonomy load(const std::filesystem::path& path);

  const std::vector<std::string>& labels() const { return labels_; }
  std::size_t size() const { return labels_.size(); }
  bool contains(std::string_view label) const;
  // Inferred from the "Corporate--" / "Personal--" label prefixes.
  std::optional<LabelGroup> group(std::string_view label) const;

 private:
  std::vector<std::string> labels_;
  std::map<std::string, LabelGroup, std::less<>> groups_;
};

// Throws ValidationError naming the offending field.
void validate_record(const Record& record, const Taxonomy* taxonomy);

nlohmann::ordered_json to_json(const Record& record);
Record record_from_json(const nlohmann::json& j);

// One JSON object per line. Every record is validated; ids must be unique and
// every line's task must equal `task`. Errors carry the 1-based line number.
std::vector<Record> load_corpus(const std::filesystem::path& path, Task task,
                                const Taxonomy* taxonomy = nullptr);
std::vector<Record> parse_corpus(std::string_view jsonl, Task task,
                                 const Taxonomy* taxonomy = nullptr);

void save_corpus(const std::filesystem::path& path,
                 const std::vector<Record>& records);
std::string format_corpus(const std::vector<Record>& records);

inline constexpr std::string_view kRationaleOpen = "<rationale>";
inline constexpr std::string_view kRationaleClose = "</rationale>";
inline constexpr std::string_view kAnswerOpen = "<answer>";
inline constexpr std::string_view kAnswerClose = "</answer>";

// "<rationale>R</rationale>\n<answer>A</answer>". Rejects empty inputs and
// bodies containing their own closing tag, so parse_target always inverts it.
std::string assemble_target(std::string_view rationale, std::string_view answer);

struct TargetParts {
  std::string rationale;
  std::string answer;
};

// Spans between the first <rationale> and the first </rationale> after it,
// then the first <answer>...</answer> after that. A stray "<rationale>" inside
// the body is kept verbatim.
TargetParts parse_target(std::string_view text);

// Whitespace-delimited token count.
std::size_t whitespace_token_count(std::string_view text);

struct CorpusStats {
  static constexpr std::size_t kBucketWidth = 64;

  std::size_t record_count = 0;
  std::size_t rationale_count = 0;
  // counts[b] covers lengths [b*64, (b+1)*64).
  std::vector<std::size_t> question_histogram;
  std::vector<std::size_t> rationale_histogram;
};

CorpusStats corpus_stats(const std::vector<Record>& records);
nlohmann::ordered_json to_json(const CorpusStats& stats);

}  // namespace forkscope
