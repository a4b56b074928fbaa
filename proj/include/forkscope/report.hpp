#pragma once

#include <chrono>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "forkscope/rftd.hpp"

namespace forkscope {

struct FrequencyTable {
  // Sorted by count descending, ties lexicographic. Tokens are verbatim.
  std::vector<std::pair<std::string, std::size_t>> counts;
  std::size_t total = 0;
  std::string config_hash;
  std::string endpoint;
  std::string corpus_id;
};

// Counts the original token at every forking position. Throws
// ValidationError when results come from different configurations.
FrequencyTable aggregate_frequencies(const std::vector<DetectionResult>& results);

enum class ReportFormat { csv, json, svg };

ReportFormat parse_report_format(std::string_view name);

std::string frequency_csv(const FrequencyTable& table);
std::string frequency_json(const FrequencyTable& table);
// Horizontal bar chart of the top_n tokens. Byte-stable for equal input.
std::string frequency_svg(const FrequencyTable& table, std::size_t top_n);

// Writes frequencies.{csv,json,svg} into out_dir; returns the written paths.
std::vector<std::filesystem::path> emit_report(const FrequencyTable& table,
                                               const std::set<ReportFormat>& formats,
                                               std::size_t top_n,
                                               const std::filesystem::path& out_dir);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::ordered_json config;
  std::uint64_t seed = 0;
  std::chrono::system_clock::time_point started_at;
  std::chrono::system_clock::time_point finished_at;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  int exit_code = 0;

  nlohmann::ordered_json to_json() const;
  void write(const std::filesystem::path& path) const;
};

inline constexpr std::string_view kVersion = "0.1.0";

// Writes `content` to `path`, throwing ValidationError when it cannot.
void write_text_file(const std::filesystem::path& path, std::string_view content);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace forkscope
