#include "forkscope/report.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/chrono.h>
#include <fmt/format.h>

#include "forkscope/error.hpp"

namespace forkscope {

FrequencyTable aggregate_frequencies(const std::vector<DetectionResult>& results) {
  FrequencyTable table;
  std::map<std::string, std::size_t> counts;
  for (const auto& r : results) {
    if (table.config_hash.empty()) {
      table.config_hash = r.config_hash;
      table.endpoint = r.endpoint;
    } else if (r.config_hash != table.config_hash) {
      throw ValidationError(fmt::format("result '{}' has config {} but the run uses {}", r.id,
                                        r.config_hash, table.config_hash));
    }
    for (const auto& f : r.forking) {
      ++counts[f.token];
      ++table.total;
    }
  }
  table.counts.assign(counts.begin(), counts.end());
  std::stable_sort(table.counts.begin(), table.counts.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return table;
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "csv") return ReportFormat::csv;
  if (name == "json") return ReportFormat::json;
  if (name == "svg") return ReportFormat::svg;
  throw ValidationError(fmt::format("unknown report format '{}'", name));
}

namespace {

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      case '\n': out += "\\n"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string frequency_csv(const FrequencyTable& table) {
  std::string out = "token,count\n";
  for (const auto& [token, count] : table.counts) {
    out += fmt::format("{},{}\n", csv_field(token), count);
  }
  return out;
}

std::string frequency_json(const FrequencyTable& table) {
  nlohmann::ordered_json j;
  j["total"] = table.total;
  j["config_hash"] = table.config_hash;
  j["endpoint"] = table.endpoint;
  j["corpus_id"] = table.corpus_id;
  auto tokens = nlohmann::ordered_json::array();
  for (const auto& [token, count] : table.counts) {
    tokens.push_back({{"token", token}, {"count", count}});
  }
  j["tokens"] = std::move(tokens);
  return j.dump(2) + "\n";
}

std::string frequency_svg(const FrequencyTable& table, std::size_t top_n) {
  if (top_n < 1) throw ValidationError("top_n must be >= 1");
  constexpr int kWidth = 720;
  constexpr int kLabelWidth = 200;
  constexpr double kBarSpan = 440.0;
  constexpr int kRowHeight = 24;
  constexpr int kTop = 40;

  const std::size_t rows = std::min(top_n, table.counts.size());
  const int height = kTop + static_cast<int>(std::max<std::size_t>(rows, 1)) * kRowHeight + 16;
  const std::size_t max_count = rows > 0 ? table.counts.front().second : 1;

  std::string out;
  out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" "
      "viewBox=\"0 0 {0} {1}\" font-family=\"sans-serif\" font-size=\"13\">\n",
      kWidth, height);
  out += "<title>Top forking token frequencies</title>\n";
  out += fmt::format("<text x=\"10\" y=\"24\" font-size=\"16\">Top {} forking tokens (total {})</text>\n",
                     rows, table.total);
  if (rows == 0) {
    out += fmt::format("<text x=\"{}\" y=\"{}\">no forking tokens</text>\n", kLabelWidth,
                       kTop + 16);
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const auto& [token, count] = table.counts[i];
    const int y = kTop + static_cast<int>(i) * kRowHeight;
    const double w = kBarSpan * static_cast<double>(count) / static_cast<double>(max_count);
    out += fmt::format(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" xml:space=\"preserve\">{}</text>\n",
        kLabelWidth - 8, y + 16, xml_escape(token));
    out += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"{:.2f}\" height=\"16\" fill=\"#4c72b0\"/>\n",
                       kLabelWidth, y + 4, w);
    out += fmt::format("<text x=\"{:.2f}\" y=\"{}\">{}</text>\n", kLabelWidth + w + 6, y + 16,
                       count);
  }
  out += "</svg>\n";
  return out;
}

void write_text_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError(fmt::format("cannot write '{}'", path.string()));
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw ValidationError(fmt::format("failed writing '{}'", path.string()));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError(fmt::format("cannot read '{}'", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::vector<std::filesystem::path> emit_report(const FrequencyTable& table,
                                               const std::set<ReportFormat>& formats,
                                               std::size_t top_n,
                                               const std::filesystem::path& out_dir) {
  if (top_n < 1) throw ValidationError("top_n must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw ValidationError(fmt::format("cannot create '{}': {}", out_dir.string(), ec.message()));
  std::vector<std::filesystem::path> written;
  for (auto format : formats) {
    switch (format) {
      case ReportFormat::csv:
        written.push_back(out_dir / "frequencies.csv");
        write_text_file(written.back(), frequency_csv(table));
        break;
      case ReportFormat::json:
        written.push_back(out_dir / "frequencies.json");
        write_text_file(written.back(), frequency_json(table));
        break;
      case ReportFormat::svg:
        written.push_back(out_dir / "frequencies.svg");
        write_text_file(written.back(), frequency_svg(table, top_n));
        break;
    }
  }
  return written;
}

nlohmann::ordered_json RunManifest::to_json() const {
  auto iso = [](std::chrono::system_clock::time_point t) {
    return fmt::format("{:%Y-%m-%dT%H:%M:%S}Z",
                       std::chrono::time_point_cast<std::chrono::seconds>(t));
  };
  nlohmann::ordered_json j;
  j["command"] = command;
  j["argv"] = argv;
  j["config"] = config;
  j["seed"] = seed;
  j["started_at"] = iso(started_at);
  j["finished_at"] = iso(finished_at);
  auto paths = [](const std::vector<std::filesystem::path>& ps) {
    std::vector<std::string> out;
    for (const auto& p : ps) out.push_back(p.string());
    return out;
  };
  j["inputs"] = paths(inputs);
  j["outputs"] = paths(outputs);
  j["exit_code"] = exit_code;
  j["version"] = kVersion;
  return j;
}

void RunManifest::write(const std::filesystem::path& path) const {
  write_text_file(path, to_json().dump(2) + "\n");
}

}  // namespace forkscope
