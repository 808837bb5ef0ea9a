#pragma once

#include "crpo/corpus.hpp"
#include "crpo/evaluation.hpp"
#include "crpo/llm_gateway.hpp"
#include "crpo/prompting.hpp"
#include "crpo/retrieval.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace crpo {

struct GeneratorConfig {
  std::string backend = "mock";  // mock | openai
  std::string url;
  std::string model = "mock";
  std::string api_key;  // never written to manifests
  std::size_t max_tokens = 1024;
  std::size_t read_timeout_s = 300;
  RetryPolicy retry;
};

struct EvaluatorConfig {
  std::string backend = "mock";  // mock | http
  std::string url;
  std::size_t read_timeout_s = 120;
  RetryPolicy retry;
};

struct ExperimentConfig {
  std::filesystem::path train_path;
  std::filesystem::path validation_path;
  std::size_t k = kDefaultTopK;
  std::vector<std::size_t> k_sweep = {5, 10, 15, 20};
  std::vector<Strategy> strategies{kAllStrategies.begin(), kAllStrategies.end()};
  GeneratorConfig generator;
  EvaluatorConfig evaluator;
  EvalMode eval_mode = EvalMode::Response;
  /// Only used to draw the query subset when `sample_n` is set.
  std::uint64_t seed = 0;
  std::optional<std::size_t> sample_n;
  bool dedupe_queries = true;
  std::size_t concurrency = 4;
  std::filesystem::path output_dir = "runs/latest";
  std::optional<std::filesystem::path> cache_dir;
  std::string template_version = std::string(kDefaultTemplateVersion);
  std::optional<std::filesystem::path> template_dir;
  PromptOptions prompt;
  Bm25Params bm25;
  /// Run aborts with FatalBackend when more than this fraction of rows
  /// fail because a backend was unreachable.
  double max_backend_failure_fraction = 0.5;
  /// Stop claiming new rows after this many were written in this
  /// invocation, leaving a partial manifest behind.
  std::optional<std::size_t> stop_after_rows;
};

/// Throws ConfigError. Deduplicates `k_sweep` (keeping first occurrences)
/// with a warning.
void validate_config(ExperimentConfig& config);

/// Overlays keys present in `doc` onto `base`. Throws ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& doc, ExperimentConfig base = {});
ExperimentConfig load_config_file(const std::filesystem::path& path, ExperimentConfig base = {});
/// CRPO_LLM_URL, CRPO_LLM_KEY, CRPO_LLM_MODEL, CRPO_EVAL_URL.
void apply_environment(ExperimentConfig& config);
/// Fields that determine results; excludes the output dir, secrets and
/// interruption hooks.
nlohmann::json config_snapshot(const ExperimentConfig& config);

struct RunRow {
  std::string query_id;
  std::size_t query_index = 0;
  Strategy strategy = Strategy::Direct;
  std::size_t k = 0;
  bool ok = false;
  std::string failed_stage;  // retrieval | prompt | generation | evaluation
  std::string error_kind;
  std::string error_message;
  std::string failed_side;
  std::vector<std::string> exemplar_ids;
  std::vector<std::string> truncated_ids;
  nlohmann::json selection;  // tiers, metric winners or top-3 rule
  bool retrieval_shortfall = false;
  bool extraction_failed = false;
  std::string optimized_prompt;
  std::optional<PairComparison> comparison;
  TokenUsage usage;

  /// Failed because a backend was unreachable or refused credentials.
  bool backend_failure() const;
};

nlohmann::json row_to_json(const RunRow& row);
/// Throws IoError on a malformed row.
RunRow row_from_json(const nlohmann::json& doc);

inline constexpr std::array<std::string_view, 7> kReportColumns = {
    "strategy", "helpfulness", "correctness", "coherence", "complexity", "verbosity", "avg"};

struct AggregateRow {
  Strategy strategy = Strategy::Direct;
  std::size_t rows = 0;
  std::size_t excluded = 0;
  std::array<double, kMetricCount> metrics{};  // mean of raw/4
  double avg = 0.0;                            // mean of normalized
};

struct RunManifest {
  nlohmann::json config;
  std::vector<RunRow> rows;
  std::vector<AggregateRow> aggregate;
  bool complete = false;
};

/// Arithmetic means per strategy over successful rows, in `strategies` order.
std::vector<AggregateRow> aggregate_rows(const std::vector<RunRow>& rows,
                                         const std::vector<Strategy>& strategies);

struct Backends {
  std::shared_ptr<LlmBackend> llm;
  std::shared_ptr<EvaluatorBackend> evaluator;
  Sleeper sleeper;
};

/// Builds the configured backends. Throws ConfigError.
Backends make_backends(const ExperimentConfig& config);

inline constexpr std::string_view kRowsFile = "rows.jsonl";
inline constexpr std::string_view kPartialRowsFile = "rows.partial.jsonl";
inline constexpr std::string_view kAggregateFile = "aggregate.json";

/// Runs every (validation query, strategy) pair: retrieve, select, build
/// the prompt, generate, evaluate, record. Rows already present in the
/// output directory are reused, so an interrupted run resumes where it
/// stopped. The final manifest is written atomically.
/// Throws ConfigError before any backend call, FatalBackend after writing
/// the manifest when too many rows lost their backend.
RunManifest run_experiment(ExperimentConfig config, const std::optional<Backends>& backends = {});

/// Reads rows.jsonl and aggregate.json from a finished run. Throws IoError.
RunManifest load_manifest(const std::filesystem::path& dir);

struct SweepPoint {
  std::size_t k = 0;
  std::map<Strategy, double> overall;
};

/// One run per k (in <output_dir>/k<k>) over the retrieval-based strategies;
/// writes sweep.json and sweep.csv to the output dir.
std::vector<SweepPoint> run_k_sweep(ExperimentConfig config, const std::optional<Backends>& backends = {});

/// Optimizes one query with one strategy and returns the generation.
struct OptimizeResult {
  ConstructedPrompt prompt;
  GenerationResult generation;
  std::string optimized_prompt;
  bool extraction_failed = false;
};
OptimizeResult optimize_query(const ExperimentConfig& config, std::string_view query, Strategy strategy,
                              const std::optional<Backends>& backends = {});

enum class ReportFormat { Csv, Markdown, Json };
ReportFormat report_format_from_name(std::string_view name);
std::string_view report_format_extension(ReportFormat format);

std::string render_report(const RunManifest& manifest, ReportFormat format);
/// Throws IoError.
void emit_report(const RunManifest& manifest, ReportFormat format, const std::filesystem::path& path);
std::string render_sweep_report(const std::vector<SweepPoint>& points, ReportFormat format);

}  // namespace crpo
