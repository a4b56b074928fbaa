#include "forkscope/dataset.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "forkscope/error.hpp"
#include "forkscope/util.hpp"

namespace forkscope {

std::string_view to_string(Task task) {
  return task == Task::nsm ? "nsm" : "tpc";
}

Task parse_task(std::string_view name) {
  if (name == "nsm") return Task::nsm;
  if (name == "tpc") return Task::tpc;
  throw ValidationError(fmt::format("unknown task '{}' (expected nsm or tpc)", name));
}

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::human: return "human";
    case Provenance::paro: return "paro";
    case Provenance::distill: return "distill";
    case Provenance::corrupted: return "corrupted";
  }
  return "human";
}

Provenance parse_provenance(std::string_view name) {
  if (name == "human") return Provenance::human;
  if (name == "paro") return Provenance::paro;
  if (name == "distill") return Provenance::distill;
  if (name == "corrupted") return Provenance::corrupted;
  throw ValidationError(fmt::format("unknown provenance '{}'", name));
}

Taxonomy::Taxonomy(std::vector<std::string> labels) : labels_(std::move(labels)) {
  std::set<std::string_view> seen;
  for (const auto& label : labels_) {
    if (label.empty()) throw ValidationError("taxonomy label is empty");
    if (!seen.insert(label).second) {
      throw ValidationError(fmt::format("duplicate taxonomy label '{}'", label));
    }
    if (label.starts_with("Corporate--")) {
      groups_.emplace(label, LabelGroup::corporate);
    } else if (label.starts_with("Personal--")) {
      groups_.emplace(label, LabelGroup::personal);
    }
  }
}

Taxonomy Taxonomy::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError(fmt::format("cannot read taxonomy '{}'", path.string()));
  std::vector<std::string> labels;
  std::string line;
  while (std::getline(in, line)) {
    std::string label = trim(line);
    if (label.empty() || label.front() == '#') continue;
    labels.push_back(std::move(label));
  }
  return Taxonomy(std::move(labels));
}

bool Taxonomy::contains(std::string_view label) const {
  return std::find(labels_.begin(), labels_.end(), label) != labels_.end();
}

std::optional<LabelGroup> Taxonomy::group(std::string_view label) const {
  auto it = groups_.find(label);
  if (it == groups_.end()) return std::nullopt;
  return it->second;
}

void validate_record(const Record& record, const Taxonomy* taxonomy) {
  if (record.id.empty()) throw ValidationError("field 'id' is empty");
  if (record.question.empty()) {
    throw ValidationError(fmt::format("record '{}': field 'question' is empty", record.id));
  }
  if (record.task == Task::nsm) {
    if (record.answer != "yes" && record.answer != "no") {
      throw ValidationError(fmt::format(
          "record '{}': nsm answer '{}' is not one of yes/no", record.id, record.answer));
    }
  } else if (taxonomy != nullptr && !taxonomy->contains(record.answer)) {
    throw ValidationError(fmt::format(
        "record '{}': label '{}' is not in the taxonomy", record.id, record.answer));
  }
  if (record.rationale && record.rationale->text.empty()) {
    throw ValidationError(fmt::format("record '{}': field 'rationale' is empty", record.id));
  }
}

nlohmann::ordered_json to_json(const Record& record) {
  nlohmann::ordered_json j;
  j["id"] = record.id;
  j["task"] = to_string(record.task);
  j["question"] = record.question;
  j["answer"] = record.answer;
  if (record.rationale) {
    j["rationale"] = record.rationale->text;
    j["provenance"] = to_string(record.rationale->provenance);
  }
  return j;
}

namespace {

std::string required_string(const nlohmann::json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end()) throw ValidationError(fmt::format("missing field '{}'", field));
  if (!it->is_string()) throw ValidationError(fmt::format("field '{}' is not a string", field));
  return it->get<std::string>();
}

}  // namespace

Record record_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("record is not a JSON object");
  Record r;
  r.id = required_string(j, "id");
  r.task = parse_task(required_string(j, "task"));
  r.question = required_string(j, "question");
  r.answer = required_string(j, "answer");
  if (j.contains("rationale")) {
    Rationale rationale;
    rationale.text = required_string(j, "rationale");
    // Older human-annotated files predate the provenance field.
    if (j.contains("provenance")) {
      rationale.provenance = parse_provenance(required_string(j, "provenance"));
    }
    r.rationale = std::move(rationale);
  } else if (j.contains("provenance")) {
    throw ValidationError("field 'provenance' given without 'rationale'");
  }
  return r;
}

std::vector<Record> parse_corpus(std::string_view jsonl, Task task,
                                 const Taxonomy* taxonomy) {
  std::vector<Record> records;
  std::set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < jsonl.size()) {
    std::size_t eol = jsonl.find('\n', pos);
    if (eol == std::string_view::npos) eol = jsonl.size();
    std::string_view line = jsonl.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      Record r = record_from_json(nlohmann::json::parse(line));
      if (r.task != task) {
        throw ValidationError(fmt::format("task '{}' does not match corpus task '{}'",
                                          to_string(r.task), to_string(task)));
      }
      validate_record(r, taxonomy);
      if (!ids.insert(r.id).second) {
        throw ValidationError(fmt::format("duplicate id '{}'", r.id));
      }
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(fmt::format("line {}: malformed JSON: {}", line_no, e.what()));
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("line {}: {}", line_no, e.what()));
    }
  }
  return records;
}

std::vector<Record> load_corpus(const std::filesystem::path& path, Task task,
                                const Taxonomy* taxonomy) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(fmt::format("cannot read corpus '{}'", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_corpus(buffer.str(), task, taxonomy);
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string format_corpus(const std::vector<Record>& records) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

void save_corpus(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError(fmt::format("cannot write '{}'", path.string()));
  out << format_corpus(records);
}

std::string assemble_target(std::string_view rationale, std::string_view answer) {
  if (rationale.empty()) throw ValidationError("cannot assemble target: empty rationale");
  if (answer.empty()) throw ValidationError("cannot assemble target: empty answer");
  if (rationale.find(kRationaleClose) != std::string_view::npos) {
    throw ValidationError("rationale contains a literal </rationale> tag");
  }
  if (answer.find(kAnswerClose) != std::string_view::npos) {
    throw ValidationError("answer contains a literal </answer> tag");
  }
  std::string out;
  out.reserve(rationale.size() + answer.size() + 48);
  out.append(kRationaleOpen).append(rationale).append(kRationaleClose);
  out.push_back('\n');
  out.append(kAnswerOpen).append(answer).append(kAnswerClose);
  return out;
}

TargetParts parse_target(std::string_view text) {
  auto r_open = text.find(kRationaleOpen);
  if (r_open == std::string_view::npos) throw ValidationError("target has no <rationale> tag");
  auto r_body = r_open + kRationaleOpen.size();
  auto r_close = text.find(kRationaleClose, r_body);
  if (r_close == std::string_view::npos) throw ValidationError("target has no </rationale> tag");
  auto a_open = text.find(kAnswerOpen, r_close + kRationaleClose.size());
  if (a_open == std::string_view::npos) {
    throw ValidationError("target has no <answer> tag after the rationale");
  }
  auto a_body = a_open + kAnswerOpen.size();
  auto a_close = text.find(kAnswerClose, a_body);
  if (a_close == std::string_view::npos) throw ValidationError("target has no </answer> tag");
  return {std::string(text.substr(r_body, r_close - r_body)),
          std::string(text.substr(a_body, a_close - a_body))};
}

std::size_t whitespace_token_count(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::size_t n = 0;
  for (std::string tok; in >> tok;) ++n;
  return n;
}

namespace {

void add_to_histogram(std::vector<std::size_t>& hist, std::size_t length) {
  std::size_t bucket = length / CorpusStats::kBucketWidth;
  if (hist.size() <= bucket) hist.resize(bucket + 1, 0);
  ++hist[bucket];
}

nlohmann::ordered_json histogram_json(const std::vector<std::size_t>& hist) {
  auto arr = nlohmann::ordered_json::array();
  for (std::size_t b = 0; b < hist.size(); ++b) {
    if (hist[b] == 0) continue;
    arr.push_back({{"lo", b * CorpusStats::kBucketWidth},
                   {"hi", (b + 1) * CorpusStats::kBucketWidth},
                   {"count", hist[b]}});
  }
  return arr;
}

}  // namespace

CorpusStats corpus_stats(const std::vector<Record>& records) {
  CorpusStats stats;
  stats.record_count = records.size();
  for (const auto& r : records) {
    add_to_histogram(stats.question_histogram, whitespace_token_count(r.question));
    if (r.rationale) {
      ++stats.rationale_count;
      add_to_histogram(stats.rationale_histogram, whitespace_token_count(r.rationale->text));
    }
  }
  return stats;
}

nlohmann::ordered_json to_json(const CorpusStats& stats) {
  nlohmann::ordered_json j;
  j["record_count"] = stats.record_count;
  j["rationale_count"] = stats.rationale_count;
  j["bucket_width"] = CorpusStats::kBucketWidth;
  j["question_lengths"] = histogram_json(stats.question_histogram);
  j["rationale_lengths"] = histogram_json(stats.rationale_histogram);
  return j;
}

}  // namespace forkscope
