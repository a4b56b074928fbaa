#include "forkscope/cli.hpp"

#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/chrono.h>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "forkscope/dataset.hpp"
#include "forkscope/error.hpp"
#include "forkscope/gateway.hpp"
#include "forkscope/mock_model.hpp"
#include "forkscope/openai_backend.hpp"
#include "forkscope/paro.hpp"
#include "forkscope/report.hpp"
#include "forkscope/reward.hpp"
#include "forkscope/rftd.hpp"

namespace forkscope::cli {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct Settings {
  RftdConfig rftd;
  DecodeParams generation{0.0, 1024, 5, 0};
  AnnotationConfig annotation;
  CorruptionPlan corruption;
  std::size_t parallel = 8;
  std::string model;
  bool chat = false;
  std::string base_url;
  std::string mock;
};

ojson to_json(const Settings& s) {
  ojson j;
  j["rftd"] = forkscope::to_json(s.rftd);
  j["generation"] = forkscope::to_json(s.generation);
  j["annotation"] = {{"retries", s.annotation.retries},
                     {"keep_on_mismatch", s.annotation.keep_on_mismatch},
                     {"decode", forkscope::to_json(s.annotation.decode)}};
  j["corruption"] = {{"fraction", s.corruption.fraction},
                     {"mode", s.corruption.mode == CorruptionMode::llm ? "llm" : "deterministic"},
                     {"retries", s.corruption.retries},
                     {"decode", forkscope::to_json(s.corruption.decode)}};
  j["parallel"] = s.parallel;
  j["model"] = s.model;
  j["chat"] = s.chat;
  j["base_url"] = s.base_url;
  j["mock"] = s.mock;
  return j;
}

nlohmann::json parse_json_text(std::string_view text, std::string_view what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(fmt::format("{}: {}", what, e.what()));
  }
}

void apply_config_file(Settings& s, const fs::path& path) {
  const auto j = parse_json_text(read_text_file(path), path.string());
  if (!j.is_object()) throw ValidationError(fmt::format("{}: expected a JSON object", path.string()));
  static const std::set<std::string> known = {"rftd",     "generation", "annotation", "corruption",
                                              "parallel", "model",      "chat",       "base_url",
                                              "mock"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) {
      throw ValidationError(fmt::format("{}: unknown config key '{}'", path.string(), key));
    }
  }
  try {
    if (j.contains("rftd")) s.rftd = rftd_config_from_json(j.at("rftd"), s.rftd);
    if (j.contains("generation")) {
      s.generation = decode_params_from_json(j.at("generation"), s.generation);
    }
    if (j.contains("annotation")) {
      const auto& a = j.at("annotation");
      s.annotation.retries = a.value("retries", s.annotation.retries);
      s.annotation.keep_on_mismatch = a.value("keep_on_mismatch", s.annotation.keep_on_mismatch);
      if (a.contains("decode")) {
        s.annotation.decode = decode_params_from_json(a.at("decode"), s.annotation.decode);
      }
    }
    if (j.contains("corruption")) {
      const auto& c = j.at("corruption");
      s.corruption.fraction = c.value("fraction", s.corruption.fraction);
      if (c.contains("mode")) {
        s.corruption.mode = parse_corruption_mode(c.at("mode").get<std::string>());
      }
      s.corruption.retries = c.value("retries", s.corruption.retries);
      if (c.contains("decode")) {
        s.corruption.decode = decode_params_from_json(c.at("decode"), s.corruption.decode);
      }
    }
    s.parallel = j.value("parallel", s.parallel);
    s.model = j.value("model", s.model);
    s.chat = j.value("chat", s.chat);
    s.base_url = j.value("base_url", s.base_url);
    s.mock = j.value("mock", s.mock);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

// Calls fn(object, line_number) for every non-blank line.
void for_each_jsonl(const fs::path& path,
                    const std::function<void(const nlohmann::json&, std::size_t)>& fn) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError(fmt::format("{}: line {}: {}", path.string(), line_no, e.what()));
    }
    if (!j.is_object()) {
      throw ValidationError(fmt::format("{}: line {}: expected a JSON object", path.string(), line_no));
    }
    try {
      fn(j, line_no);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(fmt::format("{}: line {}: {}", path.string(), line_no, e.what()));
    }
  }
}

// Rethrows the first captured error, preferring backend failures so that the
// exit code reflects them.
void rethrow_first(const std::vector<std::exception_ptr>& errors) {
  std::exception_ptr first;
  for (const auto& e : errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const BackendError&) {
      std::rethrow_exception(e);
    } catch (...) {
      if (!first) first = e;
    }
  }
  if (first) std::rethrow_exception(first);
}

// Flags shared by every subcommand.
struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string base_url;
  std::string mock;
  std::string out;
  std::optional<std::size_t> parallel;
  std::string model;
  bool chat = false;
  bool verbose = false;
  std::string task = "nsm";
  std::string taxonomy;
};

struct CommandFlags {
  std::string corpus;
  std::string responses;
  std::vector<std::string> detections;
  std::string predictions;
  std::string gold;
  std::string exemplars;
  std::string prior;
  std::string instruction;
  std::string corpus_id;
  std::vector<std::string> formats{"csv", "json", "svg"};
  std::size_t top_n = 20;
  std::optional<std::size_t> k, m, n;
  std::optional<double> alpha;
  std::optional<double> temperature;
  std::optional<int> max_tokens;
  std::string entropy_mode;
  std::optional<int> retries;
  bool keep_on_mismatch = false;
  std::optional<double> fraction;
  std::string mode;
  std::vector<std::string> prefix;
  std::string substitute;
  std::string original_answer;
  std::optional<std::size_t> depth;
  std::size_t node_budget = 1'000'000;
};

class Run {
 public:
  Run(std::string command, Settings settings, Task task, std::optional<Taxonomy> taxonomy,
      fs::path out_dir, RunManifest& manifest, std::ostream& out)
      : command_(std::move(command)),
        s_(std::move(settings)),
        task_(task),
        taxonomy_(std::move(taxonomy)),
        out_dir_(std::move(out_dir)),
        manifest_(manifest),
        out_(out) {}

  int dispatch(const CommandFlags& f) {
    if (command_ == "generate") return generate(f);
    if (command_ == "detect") return detect(f);
    if (command_ == "report") return report(f);
    if (command_ == "evaluate") return evaluate(f);
    if (command_ == "annotate") return annotate_cmd(f);
    if (command_ == "corrupt") return corrupt_cmd(f);
    if (command_ == "hint") return hint(f);
    if (command_ == "stats") return stats(f);
    if (command_ == "mock-oracle") return mock_oracle(f);
    throw ValidationError(fmt::format("unknown command '{}'", command_));
  }

 private:
  const ExtractionRule& rule() {
    if (!rule_) {
      if (task_ == Task::tpc) {
        if (!taxonomy_) throw ValidationError("task tpc needs --taxonomy");
        rule_ = ExtractionRule::tpc(*taxonomy_);
      } else {
        rule_ = ExtractionRule::nsm();
      }
    }
    return *rule_;
  }

  const Taxonomy* taxonomy() const { return taxonomy_ ? &*taxonomy_ : nullptr; }

  fs::path input(const std::string& path) {
    manifest_.inputs.emplace_back(path);
    return path;
  }

  fs::path output(const std::string& name) {
    manifest_.outputs.push_back(out_dir_ / name);
    return manifest_.outputs.back();
  }

  std::vector<Record> corpus(const std::string& path) {
    return load_corpus(input(path), task_, taxonomy());
  }

  Gateway& gateway() {
    if (!gateway_) {
      std::shared_ptr<ModelBackend> backend;
      if (!s_.mock.empty()) {
        backend = std::make_shared<MockModel>(MockSpec::load(input(s_.mock)));
      } else {
        RemoteConfig rc;
        rc.base_url = s_.base_url;
        rc.model = s_.model;
        rc.chat = s_.chat;
        rc = RemoteConfig::from_environment(rc);
        if (rc.base_url.empty()) {
          throw ValidationError(
              "no model endpoint: pass --mock or --base-url (or set FORKSCOPE_BASE_URL)");
        }
        backend = std::make_shared<OpenAiBackend>(rc);
      }
      GatewayOptions options;
      options.max_in_flight = s_.parallel;
      gateway_ = std::make_unique<Gateway>(std::move(backend), ModelRole::policy, options);
      spdlog::info("endpoint: {}", gateway_->describe());
    }
    return *gateway_;
  }

  int generate(const CommandFlags& f) {
    const auto records = corpus(f.corpus);
    const auto& g = gateway();
    const std::string instruction = default_task_instruction(task_);
    std::vector<std::string> lines(records.size());
    rethrow_first(g.for_each_index(records.size(), [&](std::size_t i) {
      const auto& r = records[i];
      const std::string prompt = build_task_prompt(r.question, instruction);
      DecodeParams params = s_.generation;
      params.seed = mix_seed(s_.generation.seed, fnv1a64(r.id));
      const Completion c = g.generate(prompt, params);
      ojson j;
      j["id"] = r.id;
      j["task"] = to_string(r.task);
      j["answer"] = r.answer;
      j["prompt"] = prompt;
      j["completion"] = forkscope::to_json(c);
      lines[i] = j.dump();
    }));
    std::string text;
    for (const auto& l : lines) text += l + "\n";
    write_text_file(output("responses.jsonl"), text);
    out_ << fmt::format("generated {} responses\n", records.size());
    return 0;
  }

  int detect(const CommandFlags& f) {
    struct Item {
      std::string id;
      std::string prompt;
      Completion response;
    };
    std::vector<Item> items;
    std::set<std::string> seen;
    for_each_jsonl(input(f.responses), [&](const nlohmann::json& j, std::size_t line) {
      Item item{j.at("id").get<std::string>(), j.at("prompt").get<std::string>(),
                completion_from_json(j.at("completion"))};
      if (!seen.insert(item.id).second) {
        throw ValidationError(fmt::format("line {}: duplicate id '{}'", line, item.id));
      }
      items.push_back(std::move(item));
    });

    spdlog::info("entropy mode: {}", to_string(s_.rftd.entropy_mode));
    const DetectionContext ctx{gateway(), rule(), s_.rftd};
    std::vector<std::optional<DetectionResult>> results(items.size());
    std::vector<std::string> skipped(items.size());
    rethrow_first(ctx.gateway.for_each_index(items.size(), [&](std::size_t i) {
      try {
        results[i] = detect_forking(ctx, items[i].prompt, items[i].response, items[i].id);
      } catch (const ValidationError& e) {
        skipped[i] = e.what();
        spdlog::warn("skipping '{}': {}", items[i].id, e.what());
      }
    }));

    std::string detections;
    std::string skipped_text;
    std::size_t forking = 0;
    std::size_t done = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (results[i]) {
        detections += forkscope::to_json(*results[i]).dump() + "\n";
        forking += results[i]->forking.size();
        ++done;
      } else {
        skipped_text += ojson{{"id", items[i].id}, {"reason", skipped[i]}}.dump() + "\n";
      }
    }
    write_text_file(output("detections.jsonl"), detections);
    write_text_file(output("skipped.jsonl"), skipped_text);
    out_ << fmt::format("{} responses analysed, {} skipped, {} forking tokens\n", done,
                        items.size() - done, forking);
    return 0;
  }

  int report(const CommandFlags& f) {
    std::vector<DetectionResult> results;
    for (const auto& path : f.detections) {
      for_each_jsonl(input(path), [&](const nlohmann::json& j, std::size_t) {
        results.push_back(detection_from_json(j));
      });
    }
    FrequencyTable table = aggregate_frequencies(results);
    table.corpus_id = f.corpus_id.empty() ? fs::path(f.detections.front()).stem().string()
                                          : f.corpus_id;
    std::set<ReportFormat> formats;
    for (const auto& name : f.formats) formats.insert(parse_report_format(name));
    for (auto& p : emit_report(table, formats, f.top_n, out_dir_)) {
      manifest_.outputs.push_back(std::move(p));
    }
    out_ << fmt::format("{} forking tokens across {} responses, {} distinct\n", table.total,
                        results.size(), table.counts.size());
    return 0;
  }

  int evaluate(const CommandFlags& f) {
    const auto gold = corpus(f.gold);
    std::map<std::string, std::optional<std::string>> predicted;
    for_each_jsonl(input(f.predictions), [&](const nlohmann::json& j, std::size_t line) {
      const auto id = j.at("id").get<std::string>();
      std::optional<std::string> label;
      if (j.contains("response")) {
        label = extract(j.at("response").get<std::string>(), rule());
      } else if (j.contains("prediction")) {
        const auto raw = trim(j.at("prediction").get<std::string>());
        if (!raw.empty()) label = raw;
      } else {
        throw ValidationError(fmt::format("line {}: needs 'response' or 'prediction'", line));
      }
      if (!predicted.emplace(id, label).second) {
        throw ValidationError(fmt::format("line {}: duplicate id '{}'", line, id));
      }
    });
    std::set<std::string> gold_ids;
    for (const auto& r : gold) gold_ids.insert(r.id);
    for (const auto& [id, _] : predicted) {
      if (!gold_ids.count(id)) throw ValidationError(fmt::format("prediction for unknown id '{}'", id));
    }

    std::vector<std::pair<std::optional<std::string>, std::string>> rows;
    EvalSets sets;
    ojson verdicts = ojson::array();
    std::string verdict_csv = "id,gold,prediction,correct\n";
    std::size_t unparseable = 0;
    for (const auto& r : gold) {
      auto it = predicted.find(r.id);
      std::optional<std::string> label = it == predicted.end() ? std::nullopt : it->second;
      if (!label) ++unparseable;
      const bool correct = label && labels_equal(*label, r.answer, task_);
      rows.emplace_back(label, r.answer);
      if (task_ == Task::nsm) {
        if (labels_equal(r.answer, "yes", task_)) sets.gold.insert(r.id);
        if (label && labels_equal(*label, "yes", task_)) sets.predicted.insert(r.id);
      } else {
        sets.gold.insert(r.id + '\t' + trim(r.answer));
        if (label) sets.predicted.insert(r.id + '\t' + trim(*label));
      }
      verdicts.push_back({{"id", r.id},
                          {"gold", r.answer},
                          {"prediction", label ? ojson(*label) : ojson(nullptr)},
                          {"correct", correct}});
      auto quote = [](const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
        return q + "\"";
      };
      verdict_csv += fmt::format("{},{},{},{}\n", quote(r.id), quote(r.answer),
                                 quote(label.value_or("")), correct ? 1 : 0);
    }
    MetricSummary m = pair_metrics(sets);
    m.accuracy = accuracy(rows, task_);

    ojson summary;
    summary["task"] = to_string(task_);
    summary["records"] = gold.size();
    summary["unparseable"] = unparseable;
    summary["metrics"] = forkscope::to_json(m);
    out_ << summary.dump(2) << "\n";

    ojson full = summary;
    full["verdicts"] = verdicts;
    write_text_file(output("evaluation.json"), full.dump(2) + "\n");
    write_text_file(output("verdicts.csv"), verdict_csv);
    write_text_file(output("metrics.csv"),
                    fmt::format("metric,value\naccuracy,{:.6f}\nprecision,{:.6f}\nrecall,{:.6f}\n"
                                "f1,{:.6f}\n",
                                m.accuracy, m.precision, m.recall, m.f1));
    return 0;
  }

  static int reject_exit_code(const std::vector<AnnotationOutcome>& rejects) {
    for (const auto& r : rejects) {
      if (r.reason.rfind("backend-error", 0) == 0) return 2;
    }
    return 0;
  }

  static std::string rejects_jsonl(const std::vector<AnnotationOutcome>& rejects) {
    std::string text;
    for (const auto& r : rejects) {
      text += ojson{{"id", r.id}, {"reason", r.reason}, {"attempts", r.attempts}}.dump() + "\n";
    }
    return text;
  }

  int annotate_cmd(const CommandFlags& f) {
    const auto records = corpus(f.corpus);
    const auto pool = corpus(f.exemplars);
    PatternPrior prior;
    if (!f.prior.empty()) {
      prior = load_pattern_prior(input(f.prior), pool);
    } else {
      std::vector<Record> exemplars;
      for (const auto& r : pool) {
        if (r.rationale && exemplars.size() < 2) exemplars.push_back(r);
      }
      prior = task_ == Task::nsm ? nsm_pattern_prior(std::move(exemplars))
                                 : tpc_pattern_prior(std::move(exemplars));
    }
    const auto result = annotate(records, gateway(), prior, s_.annotation, rule());
    save_corpus(output("annotated.jsonl"), result.kept);
    const auto rejects = result.rejects();
    write_text_file(output("rejects.jsonl"), rejects_jsonl(rejects));
    std::size_t flagged = 0;
    for (const auto& o : result.outcomes) flagged += o.flagged ? 1 : 0;
    out_ << fmt::format("{} of {} records annotated, {} rejected, {} flagged\n", result.kept.size(),
                        records.size(), rejects.size(), flagged);
    return reject_exit_code(rejects);
  }

  int corrupt_cmd(const CommandFlags& f) {
    const auto records = corpus(f.corpus);
    const Gateway* g = s_.corruption.mode == CorruptionMode::llm ? &gateway() : nullptr;
    const auto result = corrupt(records, s_.corruption, g, rule());
    save_corpus(output("corrupted.jsonl"), result.records);
    write_text_file(output("rejects.jsonl"), rejects_jsonl(result.rejects));
    ojson selected = ojson::array();
    for (const auto& id : result.selected_ids) selected.push_back(id);
    write_text_file(output("selected.json"), ojson{{"selected_ids", selected}}.dump(2) + "\n");
    out_ << fmt::format("{} of {} records selected for corruption, {} rejected\n",
                        result.selected_ids.size(), records.size(), result.rejects.size());
    return reject_exit_code(result.rejects);
  }

  int hint(const CommandFlags& f) {
    const auto records = corpus(f.corpus);
    const std::string instruction =
        f.instruction.empty() ? default_task_instruction(task_) : f.instruction;
    std::string text;
    for (const auto& r : records) {
      if (!r.rationale) {
        throw ValidationError(fmt::format("record '{}' has no rationale to use as a hint", r.id));
      }
      text += ojson{{"id", r.id},
                    {"prompt", build_hint_prompt(r.question, r.rationale->text, instruction)},
                    {"answer", r.answer}}
                  .dump() +
              "\n";
    }
    write_text_file(output("hints.jsonl"), text);
    out_ << fmt::format("{} hint prompts written\n", records.size());
    return 0;
  }

  int stats(const CommandFlags& f) {
    const auto records = corpus(f.corpus);
    const auto j = forkscope::to_json(corpus_stats(records));
    write_text_file(output("stats.json"), j.dump(2) + "\n");
    out_ << j.dump(2) << "\n";
    return 0;
  }

  int mock_oracle(const CommandFlags& f) {
    if (s_.mock.empty()) throw ValidationError("mock-oracle needs --mock");
    const auto spec = MockSpec::load(input(s_.mock));
    const double temperature = s_.rftd.rollout.temperature;
    const std::size_t depth =
        f.depth.value_or(static_cast<std::size_t>(s_.rftd.rollout.max_tokens));
    const auto r = exact_divergence(spec, f.prefix, f.substitute, rule(), f.original_answer,
                                    temperature, depth, f.node_budget);
    ojson j;
    j["prefix"] = f.prefix;
    j["substitute"] = f.substitute;
    j["original_answer"] = f.original_answer;
    j["temperature"] = temperature;
    j["depth_bound"] = depth;
    j["divergent_mass"] = r.divergent_mass;
    j["unterminated_mass"] = r.unterminated_mass;
    j["nodes"] = r.nodes;
    write_text_file(output("oracle.json"), j.dump(2) + "\n");
    out_ << j.dump(2) << "\n";
    return 0;
  }

  std::string command_;
  Settings s_;
  Task task_;
  std::optional<Taxonomy> taxonomy_;
  std::optional<ExtractionRule> rule_;
  fs::path out_dir_;
  RunManifest& manifest_;
  std::ostream& out_;
  std::unique_ptr<Gateway> gateway_;
};

Settings resolve_settings(const GlobalFlags& g, const CommandFlags& f) {
  Settings s;
  if (!g.config.empty()) apply_config_file(s, g.config);
  if (g.seed) {
    s.rftd.rollout.seed = *g.seed;
    s.generation.seed = *g.seed;
    s.annotation.decode.seed = *g.seed;
    s.corruption.seed = *g.seed;
    s.corruption.decode.seed = *g.seed;
  }
  if (!g.base_url.empty()) s.base_url = g.base_url;
  if (!g.mock.empty()) s.mock = g.mock;
  if (g.parallel) s.parallel = *g.parallel;
  if (!g.model.empty()) s.model = g.model;
  if (g.chat) s.chat = true;
  if (s.parallel < 1) throw ValidationError("--parallel must be >= 1");

  if (f.k) s.rftd.k = *f.k;
  if (f.m) s.rftd.m = *f.m;
  if (f.n) s.rftd.n = *f.n;
  if (f.alpha) s.rftd.alpha = *f.alpha;
  if (!f.entropy_mode.empty()) s.rftd.entropy_mode = parse_entropy_mode(f.entropy_mode);
  if (f.temperature) s.rftd.rollout.temperature = *f.temperature;
  if (f.max_tokens) s.rftd.rollout.max_tokens = *f.max_tokens;
  if (f.retries) {
    s.annotation.retries = *f.retries;
    s.corruption.retries = *f.retries;
  }
  if (f.keep_on_mismatch) s.annotation.keep_on_mismatch = true;
  if (f.fraction) s.corruption.fraction = *f.fraction;
  if (!f.mode.empty()) s.corruption.mode = parse_corruption_mode(f.mode);

  s.rftd.validate();
  s.generation.validate();
  s.annotation.validate();
  s.corruption.validate();
  return s;
}

fs::path default_out_dir(const std::string& command) {
  const auto now = std::chrono::time_point_cast<std::chrono::seconds>(
      std::chrono::system_clock::now());
  return fs::path("runs") / fmt::format("{}-{:%Y%m%dT%H%M%S}-{}", command, now, ::getpid());
}

// Routes library logging to `err` for the duration of one run.
class ScopedLogger {
 public:
  ScopedLogger(std::ostream& err, bool verbose) : previous_(spdlog::default_logger()) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
    auto logger = std::make_shared<spdlog::logger>("forkscope", sink);
    logger->set_pattern("[%l] %v");
    logger->set_level(verbose ? spdlog::level::debug : spdlog::level::warn);
    spdlog::set_default_logger(logger);
  }
  ~ScopedLogger() { spdlog::set_default_logger(previous_); }
  ScopedLogger(const ScopedLogger&) = delete;
  ScopedLogger& operator=(const ScopedLogger&) = delete;

 private:
  std::shared_ptr<spdlog::logger> previous_;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  GlobalFlags g;
  CommandFlags f;

  CLI::App app{"Forking-token detection and rationale dataset tooling", "forkscope"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Run seed for every sampled call");
  app.add_option("--base-url", g.base_url, "OpenAI-compatible endpoint");
  app.add_option("--mock", g.mock, "Use the in-process mock model described by this JSON file");
  app.add_option("--out", g.out, "Output directory (default runs/<command>-<time>-<pid>)");
  app.add_option("--parallel", g.parallel, "Maximum in-flight model calls");
  app.add_option("--model", g.model, "Model name sent to the endpoint");
  app.add_flag("--chat", g.chat, "Use the chat completions route");
  app.add_flag("-v,--verbose", g.verbose, "Debug logging on stderr");
  app.add_option("--task", g.task, "nsm or tpc")->check(CLI::IsMember({"nsm", "tpc"}));
  app.add_option("--taxonomy", g.taxonomy, "Label file, one per line (tpc)");

  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->fallthrough();
    return s;
  };

  auto* generate = sub("generate", "Greedy responses with top-N logprobs for a QA corpus");
  generate->add_option("--corpus", f.corpus, "QA corpus (JSONL)")->required();

  auto* detect = sub("detect", "Forking-token detection over generated responses");
  detect->add_option("--responses", f.responses, "Output of generate")->required();
  detect->add_option("--k", f.k, "Candidate positions");
  detect->add_option("--m", f.m, "Substitutes per position");
  detect->add_option("--n", f.n, "Rollouts per substitute");
  detect->add_option("--alpha", f.alpha, "Divergence threshold");
  detect->add_option("--temperature", f.temperature, "Rollout temperature");
  detect->add_option("--max-tokens", f.max_tokens, "Rollout token budget");
  detect->add_option("--entropy-mode", f.entropy_mode, "renormalized or residual_bucket");

  auto* report = sub("report", "Token frequency tables and chart from detections");
  report->add_option("--detections", f.detections, "Output(s) of detect")->required();
  report->add_option("--top-n", f.top_n, "Bars in the chart");
  report->add_option("--format", f.formats, "csv, json, svg")->delimiter(',');
  report->add_option("--corpus-id", f.corpus_id, "Corpus label stored in the table");

  auto* evaluate = sub("evaluate", "Accuracy, precision, recall and F1 of predictions");
  evaluate->add_option("--pred,--predictions", f.predictions, "JSONL with id and response or prediction")
      ->required();
  evaluate->add_option("--gold", f.gold, "Gold corpus (JSONL)")->required();

  auto* annotate = sub("annotate", "Pattern-guided rationale synthesis");
  annotate->add_option("--corpus", f.corpus, "QA corpus to annotate")->required();
  annotate->add_option("--exemplars", f.exemplars, "Rationale corpus holding the exemplars")
      ->required();
  annotate->add_option("--prior", f.prior, "Pattern prior JSON (default: built-in)");
  annotate->add_option("--retries", f.retries, "Extra attempts per record");
  annotate->add_flag("--keep-on-mismatch", f.keep_on_mismatch, "Keep and flag mismatched records");

  auto* corrupt = sub("corrupt", "Flip the conclusion of a fraction of rationales");
  corrupt->add_option("--corpus", f.corpus, "Rationale corpus")->required();
  corrupt->add_option("--fraction", f.fraction, "Share of records to corrupt");
  corrupt->add_option("--mode", f.mode, "deterministic or llm");
  corrupt->add_option("--retries", f.retries, "Extra attempts per record (llm mode)");

  auto* hint = sub("hint", "Hint-augmented prompts from a rationale corpus");
  hint->add_option("--corpus", f.corpus, "Rationale corpus")->required();
  hint->add_option("--instruction", f.instruction, "Task instruction override");

  auto* stats = sub("stats", "Length histograms of a corpus");
  stats->add_option("--corpus", f.corpus, "Corpus (JSONL)")->required();

  auto* oracle = sub("mock-oracle", "Exact divergence probability on the mock model");
  oracle->add_option("--prefix", f.prefix, "Response tokens before the substitute");
  oracle->add_option("--substitute", f.substitute, "Substituted token")->required();
  oracle->add_option("--original-answer", f.original_answer, "Answer of the original response")
      ->required();
  oracle->add_option("--temperature", f.temperature, "Rollout temperature");
  oracle->add_option("--depth", f.depth, "Maximum continuation length");
  oracle->add_option("--node-budget", f.node_budget, "Search node limit");

  std::vector<std::string> argv_storage;
  argv_storage.reserve(args.size() + 1);
  argv_storage.emplace_back("forkscope");
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_storage) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  ScopedLogger logger(err, g.verbose);

  RunManifest manifest;
  manifest.command = command;
  manifest.argv = args;
  manifest.started_at = std::chrono::system_clock::now();
  const fs::path out_dir = g.out.empty() ? default_out_dir(command) : fs::path(g.out);

  int code = 0;
  bool have_dir = false;
  try {
    fs::create_directories(out_dir);
    have_dir = true;
    Settings settings = resolve_settings(g, f);
    manifest.config = to_json(settings);
    manifest.config["task"] = g.task;
    manifest.seed = settings.rftd.rollout.seed;
    if (!g.config.empty()) manifest.inputs.emplace_back(g.config);

    std::optional<Taxonomy> taxonomy;
    if (!g.taxonomy.empty()) {
      manifest.inputs.emplace_back(g.taxonomy);
      taxonomy = Taxonomy::load(g.taxonomy);
    }
    Run run(command, std::move(settings), parse_task(g.task), std::move(taxonomy), out_dir,
            manifest, out);
    code = run.dispatch(f);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    code = 1;
  } catch (const BackendError& e) {
    err << "backend error: " << e.what() << "\n";
    code = 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    code = 1;
  }

  manifest.finished_at = std::chrono::system_clock::now();
  manifest.exit_code = code;
  if (have_dir) {
    try {
      manifest.write(out_dir / "manifest.json");
    } catch (const Error& e) {
      err << "error: " << e.what() << "\n";
      if (code == 0) code = 1;
    }
  }
  return code;
}

}  // namespace forkscope::cli
