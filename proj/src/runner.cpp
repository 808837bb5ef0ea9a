#include "crpo/runner.hpp"

#include "crpo/error.hpp"
#include "crpo/selection.hpp"
#include "crpo/util.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

namespace crpo {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void validate_config(ExperimentConfig& config) {
  if (config.train_path.empty()) throw ConfigError("train corpus path is required");
  if (config.validation_path.empty()) throw ConfigError("validation corpus path is required");
  if (config.k < kMinTopK) {
    throw ConfigError("k=" + std::to_string(config.k) + " is below 5 (we require k >= 5)");
  }
  std::vector<std::size_t> sweep;
  for (std::size_t k : config.k_sweep) {
    if (k < kMinTopK) {
      throw ConfigError("k_sweep value " + std::to_string(k) + " is below 5 (we require k >= 5)");
    }
    if (std::find(sweep.begin(), sweep.end(), k) != sweep.end()) {
      spdlog::warn("dropping duplicate k={} from k_sweep", k);
      continue;
    }
    sweep.push_back(k);
  }
  config.k_sweep = std::move(sweep);
  if (config.strategies.empty()) throw ConfigError("no strategies configured");
  std::set<Strategy> seen;
  for (Strategy s : config.strategies) {
    if (!seen.insert(s).second) {
      throw ConfigError("strategy " + std::string(strategy_name(s)) + " listed twice");
    }
  }
  if (config.concurrency == 0) throw ConfigError("concurrency must be at least 1");
  if (config.sample_n && *config.sample_n == 0) throw ConfigError("sample_n must be positive");
  if (!(config.max_backend_failure_fraction >= 0.0 && config.max_backend_failure_fraction <= 1.0)) {
    throw ConfigError("max_backend_failure_fraction must be within [0, 1]");
  }
  if (config.generator.backend != "mock" && config.generator.backend != "openai") {
    throw ConfigError("generator backend must be mock or openai, got '" + config.generator.backend + "'");
  }
  if (config.generator.backend == "openai" && config.generator.url.empty()) {
    throw ConfigError("generator backend openai needs a URL (CRPO_LLM_URL)");
  }
  if (config.evaluator.backend != "mock" && config.evaluator.backend != "http") {
    throw ConfigError("evaluator backend must be mock or http, got '" + config.evaluator.backend + "'");
  }
  if (config.evaluator.backend == "http" && config.evaluator.url.empty()) {
    throw ConfigError("evaluator backend http needs a URL (CRPO_EVAL_URL)");
  }
  if (config.generator.max_tokens == 0) throw ConfigError("max_tokens must be positive");
  if (config.template_version.empty()) throw ConfigError("template_version is required");
  if (config.prompt.exemplar_char_budget == 0) throw ConfigError("exemplar_char_budget must be positive");
  if (!(config.bm25.k1 >= 0.0) || !(config.bm25.b >= 0.0 && config.bm25.b <= 1.0)) {
    throw ConfigError("BM25 params need k1 >= 0 and 0 <= b <= 1");
  }
}

namespace {

void read_retry(const json& doc, RetryPolicy& retry) {
  if (doc.contains("max_attempts")) retry.max_attempts = doc.at("max_attempts").get<std::size_t>();
  if (doc.contains("initial_backoff_ms")) {
    retry.initial_backoff = std::chrono::milliseconds(doc.at("initial_backoff_ms").get<long long>());
  }
  if (doc.contains("max_backoff_ms")) {
    retry.max_backoff = std::chrono::milliseconds(doc.at("max_backoff_ms").get<long long>());
  }
}

json retry_json(const RetryPolicy& retry) {
  return {{"max_attempts", retry.max_attempts},
          {"initial_backoff_ms", retry.initial_backoff.count()},
          {"max_backoff_ms", retry.max_backoff.count()}};
}

template <typename T>
void read_if(const json& doc, const char* key, T& out) {
  if (auto it = doc.find(key); it != doc.end()) out = it->get<T>();
}

void read_path_if(const json& doc, const char* key, std::filesystem::path& out) {
  if (auto it = doc.find(key); it != doc.end()) out = it->get<std::string>();
}

void read_opt_path_if(const json& doc, const char* key, std::optional<std::filesystem::path>& out) {
  if (auto it = doc.find(key); it != doc.end()) {
    if (it->is_null()) {
      out.reset();
    } else {
      out = it->get<std::string>();
    }
  }
}

}  // namespace

ExperimentConfig config_from_json(const json& doc, ExperimentConfig base) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  try {
    read_path_if(doc, "train", base.train_path);
    read_path_if(doc, "validation", base.validation_path);
    read_if(doc, "k", base.k);
    read_if(doc, "k_sweep", base.k_sweep);
    if (auto it = doc.find("strategies"); it != doc.end()) {
      base.strategies.clear();
      for (const auto& s : *it) base.strategies.push_back(strategy_from_name(s.get<std::string>()));
    }
    if (auto it = doc.find("generator"); it != doc.end()) {
      auto& g = base.generator;
      read_if(*it, "backend", g.backend);
      read_if(*it, "url", g.url);
      read_if(*it, "model", g.model);
      read_if(*it, "max_tokens", g.max_tokens);
      read_if(*it, "read_timeout_s", g.read_timeout_s);
      read_retry(*it, g.retry);
    }
    if (auto it = doc.find("evaluator"); it != doc.end()) {
      auto& e = base.evaluator;
      read_if(*it, "backend", e.backend);
      read_if(*it, "url", e.url);
      read_if(*it, "read_timeout_s", e.read_timeout_s);
      read_retry(*it, e.retry);
    }
    if (auto it = doc.find("eval_mode"); it != doc.end()) {
      base.eval_mode = eval_mode_from_name(it->get<std::string>());
    }
    read_if(doc, "seed", base.seed);
    if (auto it = doc.find("sample_n"); it != doc.end()) {
      if (it->is_null()) {
        base.sample_n.reset();
      } else {
        base.sample_n = it->get<std::size_t>();
      }
    }
    read_if(doc, "dedupe_queries", base.dedupe_queries);
    read_if(doc, "concurrency", base.concurrency);
    read_path_if(doc, "output_dir", base.output_dir);
    read_opt_path_if(doc, "cache_dir", base.cache_dir);
    read_if(doc, "template_version", base.template_version);
    read_opt_path_if(doc, "template_dir", base.template_dir);
    if (auto it = doc.find("prompt"); it != doc.end()) {
      read_if(*it, "exemplar_char_budget", base.prompt.exemplar_char_budget);
      read_if(*it, "show_scores", base.prompt.show_scores);
      if (auto r = it->find("tps_ranking"); r != it->end()) {
        base.prompt.tps_ranking = tps_ranking_from_name(r->get<std::string>());
      }
    }
    if (auto it = doc.find("bm25"); it != doc.end()) {
      read_if(*it, "k1", base.bm25.k1);
      read_if(*it, "b", base.bm25.b);
    }
    read_if(doc, "max_backend_failure_fraction", base.max_backend_failure_fraction);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return base;
}

ExperimentConfig load_config_file(const std::filesystem::path& path, ExperimentConfig base) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const FileNotFound&) {
    throw ConfigError("config file not found: " + path.string());
  }
  json doc = json::parse(text, nullptr, false, /*ignore_comments=*/true);
  if (doc.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  return config_from_json(doc, std::move(base));
}

void apply_environment(ExperimentConfig& config) {
  if (const char* url = std::getenv("CRPO_LLM_URL"); url && *url) {
    config.generator.url = url;
    if (config.generator.backend == "mock") config.generator.backend = "openai";
  }
  if (const char* key = std::getenv("CRPO_LLM_KEY"); key && *key) config.generator.api_key = key;
  if (const char* model = std::getenv("CRPO_LLM_MODEL"); model && *model) config.generator.model = model;
  if (const char* url = std::getenv("CRPO_EVAL_URL"); url && *url) {
    config.evaluator.url = url;
    if (config.evaluator.backend == "mock") config.evaluator.backend = "http";
  }
}

json config_snapshot(const ExperimentConfig& config) {
  json strategies = json::array();
  for (Strategy s : config.strategies) strategies.push_back(strategy_name(s));
  json doc = {
      {"k", config.k},
      {"k_sweep", config.k_sweep},
      {"strategies", strategies},
      {"generator",
       {{"backend", config.generator.backend},
        {"url", config.generator.url},
        {"model", config.generator.model},
        {"temperature", 0.0},
        {"max_tokens", config.generator.max_tokens},
        {"retry", retry_json(config.generator.retry)}}},
      {"evaluator", {{"backend", config.evaluator.backend}, {"url", config.evaluator.url}}},
      {"eval_mode", eval_mode_name(config.eval_mode)},
      {"seed", config.seed},
      {"sample_n", config.sample_n ? json(*config.sample_n) : json(nullptr)},
      {"dedupe_queries", config.dedupe_queries},
      {"template_version", config.template_version},
      {"prompt",
       {{"exemplar_char_budget", config.prompt.exemplar_char_budget},
        {"show_scores", config.prompt.show_scores},
        {"tps_ranking", tps_ranking_name(config.prompt.tps_ranking)}}},
      {"bm25", {{"k1", config.bm25.k1}, {"b", config.bm25.b}}},
      {"max_backend_failure_fraction", config.max_backend_failure_fraction},
  };
  return doc;
}

// ---------------------------------------------------------------------------
// Rows
// ---------------------------------------------------------------------------

bool RunRow::backend_failure() const {
  if (ok) return false;
  return error_kind == "TransportError" || error_kind == "AuthError" ||
         error_kind == "EvaluatorTransport";
}

namespace {

json eval_json(const EvalVector& v) { return {{"raw", v.raw}, {"normalized", v.normalized}}; }

EvalVector eval_from_json(const json& doc) {
  EvalVector v;
  v.raw = doc.at("raw").get<std::array<double, kMetricCount>>();
  v.normalized = doc.at("normalized").get<double>();
  return v;
}

}  // namespace

json row_to_json(const RunRow& row) {
  json doc = {{"query_id", row.query_id},
              {"query_index", row.query_index},
              {"strategy", strategy_name(row.strategy)},
              {"k", row.k},
              {"status", row.ok ? "ok" : "failed"},
              {"exemplar_ids", row.exemplar_ids},
              {"truncated_ids", row.truncated_ids},
              {"selection", row.selection},
              {"retrieval_shortfall", row.retrieval_shortfall},
              {"extraction_failed", row.extraction_failed},
              {"optimized_prompt", row.optimized_prompt},
              {"usage",
               {{"prompt_tokens", row.usage.prompt_tokens},
                {"completion_tokens", row.usage.completion_tokens}}}};
  if (row.comparison) {
    const auto& c = *row.comparison;
    doc["comparison"] = {{"original", eval_json(c.original_eval)},
                         {"optimized", eval_json(c.optimized_eval)},
                         {"delta_per_metric", c.delta_per_metric},
                         {"delta_overall", c.delta_overall},
                         {"original_response", c.original_response},
                         {"optimized_response", c.optimized_response}};
  } else {
    doc["comparison"] = nullptr;
  }
  if (!row.ok) {
    doc["error"] = {{"stage", row.failed_stage},
                    {"kind", row.error_kind},
                    {"message", row.error_message},
                    {"side", row.failed_side}};
  } else {
    doc["error"] = nullptr;
  }
  return doc;
}

RunRow row_from_json(const json& doc) {
  try {
    RunRow row;
    row.query_id = doc.at("query_id").get<std::string>();
    row.query_index = doc.at("query_index").get<std::size_t>();
    row.strategy = strategy_from_name(doc.at("strategy").get<std::string>());
    row.k = doc.at("k").get<std::size_t>();
    row.ok = doc.at("status").get<std::string>() == "ok";
    row.exemplar_ids = doc.at("exemplar_ids").get<std::vector<std::string>>();
    row.truncated_ids = doc.at("truncated_ids").get<std::vector<std::string>>();
    row.selection = doc.at("selection");
    row.retrieval_shortfall = doc.at("retrieval_shortfall").get<bool>();
    row.extraction_failed = doc.at("extraction_failed").get<bool>();
    row.optimized_prompt = doc.at("optimized_prompt").get<std::string>();
    row.usage.prompt_tokens = doc.at("usage").at("prompt_tokens").get<std::size_t>();
    row.usage.completion_tokens = doc.at("usage").at("completion_tokens").get<std::size_t>();
    if (const auto& c = doc.at("comparison"); !c.is_null()) {
      PairComparison cmp;
      cmp.original_eval = eval_from_json(c.at("original"));
      cmp.optimized_eval = eval_from_json(c.at("optimized"));
      cmp.delta_per_metric = c.at("delta_per_metric").get<std::array<double, kMetricCount>>();
      cmp.delta_overall = c.at("delta_overall").get<double>();
      cmp.original_response = c.at("original_response").get<std::string>();
      cmp.optimized_response = c.at("optimized_response").get<std::string>();
      row.comparison = std::move(cmp);
    }
    if (const auto& e = doc.at("error"); !e.is_null()) {
      row.failed_stage = e.at("stage").get<std::string>();
      row.error_kind = e.at("kind").get<std::string>();
      row.error_message = e.at("message").get<std::string>();
      row.failed_side = e.at("side").get<std::string>();
    }
    return row;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed manifest row: ") + e.what());
  } catch (const ConfigError& e) {
    throw IoError(std::string("malformed manifest row: ") + e.what());
  }
}

std::vector<AggregateRow> aggregate_rows(const std::vector<RunRow>& rows,
                                         const std::vector<Strategy>& strategies) {
  std::vector<AggregateRow> out;
  for (Strategy s : strategies) {
    AggregateRow agg;
    agg.strategy = s;
    std::array<double, kMetricCount> sums{};
    double avg_sum = 0.0;
    for (const auto& row : rows) {
      if (row.strategy != s) continue;
      if (!row.ok || !row.comparison) {
        ++agg.excluded;
        continue;
      }
      ++agg.rows;
      const auto& e = row.comparison->optimized_eval;
      for (Metric m : kAllMetrics) sums[static_cast<std::size_t>(m)] += e.normalized_metric(m);
      avg_sum += e.normalized;
    }
    const double n = static_cast<double>(agg.rows);
    for (std::size_t i = 0; i < kMetricCount; ++i) agg.metrics[i] = agg.rows ? sums[i] / n : std::nan("");
    agg.avg = agg.rows ? avg_sum / n : std::nan("");
    out.push_back(agg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

Backends make_backends(const ExperimentConfig& config) {
  Backends b;
  if (config.generator.backend == "mock") {
    b.llm = std::make_shared<MockLlmBackend>();
  } else if (config.generator.backend == "openai") {
    HttpEndpointConfig http;
    http.url = config.generator.url;
    http.api_key = config.generator.api_key;
    http.read_timeout = std::chrono::seconds(config.generator.read_timeout_s);
    b.llm = std::make_shared<OpenAiChatBackend>(http);
  } else {
    throw ConfigError("unknown generator backend '" + config.generator.backend + "'");
  }
  if (config.evaluator.backend == "mock") {
    b.evaluator = std::make_shared<MockEvaluator>();
  } else if (config.evaluator.backend == "http") {
    b.evaluator = std::make_shared<HttpEvaluator>(
        config.evaluator.url, config.evaluator.retry,
        std::chrono::seconds(config.evaluator.read_timeout_s));
  } else {
    throw ConfigError("unknown evaluator backend '" + config.evaluator.backend + "'");
  }
  return b;
}

namespace {

struct Pipeline {
  const Corpus& train;
  const Bm25Index& index;
  const PromptBuilder& builder;
  LlmGateway& gateway;
  EvaluatorBackend& evaluator;
  EvalMode eval_mode;
};

json ids_json(const std::vector<ScoredCandidate>& tier) {
  json ids = json::array();
  for (const auto& c : tier) ids.push_back(c.record_id);
  return ids;
}

// Builds the strategy's prompt, filling the provenance fields of `row`.
ConstructedPrompt construct(const Pipeline& p, std::string_view query, Strategy strategy,
                            std::size_t k, RunRow& row) {
  std::vector<ScoredCandidate> candidates;
  if (uses_retrieval(strategy)) {
    row.failed_stage = "retrieval";
    const auto retrieved = retrieve(p.index, query, k);
    row.retrieval_shortfall = retrieved.shortfall;
    candidates = score_candidates(retrieved, p.train);
  }
  row.failed_stage = "prompt";
  ConstructedPrompt prompt;
  switch (strategy) {
    case Strategy::CrpoTiered: {
      const auto tiers = partition_tiers(candidates);
      row.selection = {{"rule", "rank_tertiles"},
                       {"high", ids_json(tiers.high)},
                       {"medium", ids_json(tiers.medium)},
                       {"low", ids_json(tiers.low)}};
      prompt = p.builder.build_reflect(query, tiers);
      break;
    }
    case Strategy::CrpoMultiMetric: {
      const auto best = best_per_metric(candidates);
      json winners = json::object();
      for (Metric m : kAllMetrics) winners[std::string(metric_name(m))] = best[m]->record_id;
      row.selection = {{"rule", "metric_argmax"}, {"winners", winners}};
      prompt = p.builder.build_integrate(query, best);
      break;
    }
    case Strategy::TpsTop3:
      row.selection = {{"rule", std::string("top3_by_") +
                                    std::string(tps_ranking_name(p.builder.options().tps_ranking))},
                       {"ids", ids_json(p.builder.tps_selection(candidates))}};
      prompt = p.builder.build_baseline(query, strategy, candidates);
      break;
    case Strategy::Rag:
      row.selection = {{"rule", "bm25_rank"}};
      prompt = p.builder.build_baseline(query, strategy, candidates);
      break;
    case Strategy::Direct:
    case Strategy::CoT:
      row.selection = nullptr;
      prompt = p.builder.build_baseline(query, strategy, candidates);
      break;
  }
  row.exemplar_ids = prompt.exemplar_ids;
  row.truncated_ids = prompt.truncated_ids;
  return prompt;
}

std::string optimized_text(const GenerationResult& gen, bool& extraction_failed) {
  if (gen.extracted_prompt && !gen.extracted_prompt->empty()) {
    extraction_failed = false;
    return *gen.extracted_prompt;
  }
  extraction_failed = true;
  return trim(gen.raw_text);
}

struct Query {
  std::string id;
  std::string text;
};

RunRow process_row(const Pipeline& p, const Query& q, std::size_t query_index, Strategy strategy,
                   std::size_t k) {
  RunRow row;
  row.query_id = q.id;
  row.query_index = query_index;
  row.strategy = strategy;
  row.k = uses_retrieval(strategy) ? k : 0;
  const std::string tag = q.id + "/" + std::string(strategy_name(strategy));
  try {
    const auto prompt = construct(p, q.text, strategy, k, row);
    row.failed_stage = "generation";
    const auto gen = p.gateway.generate(p.gateway.make_request(prompt.rendered_text, tag));
    row.usage = gen.usage;
    row.optimized_prompt = optimized_text(gen, row.extraction_failed);
    row.failed_stage = "evaluation";
    row.comparison = compare_pair(q.text, q.text, row.optimized_prompt, p.gateway, p.evaluator,
                                  p.eval_mode, tag);
    row.ok = true;
    row.failed_stage.clear();
  } catch (const PairSideError& e) {
    row.ok = false;
    row.error_kind = e.cause_kind();
    row.error_message = e.what();
    row.failed_side = std::string(pair_side_name(e.side()));
  } catch (const Error& e) {
    row.ok = false;
    row.error_kind = e.kind();
    row.error_message = e.what();
  }
  if (!row.ok) {
    spdlog::warn("row {} failed at {}: {}", tag, row.failed_stage, row.error_message);
  }
  return row;
}

std::vector<Query> select_queries(const Corpus& validation, const ExperimentConfig& config) {
  std::vector<Query> all;
  std::set<std::string_view> seen;
  for (const auto& r : validation.records()) {
    if (config.dedupe_queries && !seen.insert(r.prompt_text).second) continue;
    all.push_back({r.id, r.prompt_text});
  }
  if (!config.sample_n || *config.sample_n >= all.size()) return all;
  // Partial Fisher-Yates on raw mt19937_64 output (portable across standard
  // libraries, unlike std::shuffle).
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const std::size_t n = *config.sample_n;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (order.size() - i));
    std::swap(order[i], order[j]);
  }
  order.resize(n);
  std::sort(order.begin(), order.end());
  std::vector<Query> sampled;
  sampled.reserve(n);
  for (std::size_t i : order) sampled.push_back(all[i]);
  return sampled;
}

std::string row_key(std::string_view query_id, Strategy s) {
  return std::string(query_id) + "|" + std::string(strategy_name(s));
}

// Parses a row file. A torn final line (interrupted write) is dropped.
std::vector<RunRow> read_row_file(const std::filesystem::path& path, const json& expected_config) {
  std::vector<RunRow> rows;
  if (!std::filesystem::exists(path)) return rows;
  std::istringstream in(read_file(path));
  std::string line;
  bool header_seen = false;
  std::vector<std::string> lines;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  for (std::size_t i = 0; i < lines.size(); ++i) {
    json doc = json::parse(lines[i], nullptr, false);
    if (doc.is_discarded()) {
      if (i + 1 == lines.size()) {
        spdlog::warn("dropping torn final line of {}", path.string());
        break;
      }
      throw IoError("corrupt manifest line " + std::to_string(i + 1) + " in " + path.string());
    }
    if (!header_seen && doc.contains("header")) {
      header_seen = true;
      if (doc["header"].value("config", json()) != expected_config) {
        throw ConfigError("output directory holds rows from a different configuration: " +
                          path.parent_path().string());
      }
      continue;
    }
    rows.push_back(row_from_json(doc));
  }
  return rows;
}

json aggregate_json(const std::vector<AggregateRow>& aggregate) {
  json out = json::array();
  for (const auto& a : aggregate) {
    json row = {{"strategy", strategy_name(a.strategy)}, {"rows", a.rows}, {"excluded", a.excluded}};
    for (Metric m : kAllMetrics) {
      const double v = a.metrics[static_cast<std::size_t>(m)];
      row[std::string(metric_name(m))] = std::isnan(v) ? json(nullptr) : json(v);
    }
    row["avg"] = std::isnan(a.avg) ? json(nullptr) : json(a.avg);
    out.push_back(row);
  }
  return out;
}

std::vector<AggregateRow> aggregate_from_json(const json& doc) {
  std::vector<AggregateRow> out;
  for (const auto& row : doc) {
    AggregateRow a;
    a.strategy = strategy_from_name(row.at("strategy").get<std::string>());
    a.rows = row.at("rows").get<std::size_t>();
    a.excluded = row.at("excluded").get<std::size_t>();
    for (Metric m : kAllMetrics) {
      const auto& v = row.at(std::string(metric_name(m)));
      a.metrics[static_cast<std::size_t>(m)] = v.is_null() ? std::nan("") : v.get<double>();
    }
    a.avg = row.at("avg").is_null() ? std::nan("") : row.at("avg").get<double>();
    out.push_back(a);
  }
  return out;
}

class RowWriter {
 public:
  RowWriter(const std::filesystem::path& path, const json& header, const std::vector<RunRow>& existing)
      : path_(path) {
    // Rewrite cleanly so a torn line from an interrupted run is not extended.
    std::string contents = json{{"header", {{"config", header}}}}.dump() + "\n";
    for (const auto& r : existing) contents += row_to_json(r).dump() + "\n";
    write_file_atomic(path_, contents);
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw IoError("cannot append to " + path_.string());
  }

  void append(const RunRow& row) {
    const std::string line = row_to_json(row).dump() + "\n";
    std::lock_guard lock(mutex_);
    out_ << line;
    out_.flush();
    if (!out_) throw IoError("write failed on " + path_.string());
  }

  void close() { out_.close(); }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mutex_;
};

TemplateSet load_templates(const ExperimentConfig& config) {
  if (config.template_dir) {
    auto set = TemplateSet::from_directory(*config.template_dir);
    if (set.version() != config.template_version) {
      throw ConfigError("template dir " + config.template_dir->string() + " is version '" +
                        set.version() + "' but the config pins '" + config.template_version + "'");
    }
    return set;
  }
  try {
    return TemplateSet::builtin(config.template_version);
  } catch (const TemplateError& e) {
    throw ConfigError(e.what());
  }
}

GatewayConfig gateway_config(const ExperimentConfig& config) {
  GatewayConfig g;
  g.model_name = config.generator.model;
  g.max_tokens = config.generator.max_tokens;
  g.temperature = 0.0;
  g.max_in_flight = config.concurrency;
  g.retry = config.generator.retry;
  return g;
}

}  // namespace

RunManifest run_experiment(ExperimentConfig config, const std::optional<Backends>& injected) {
  validate_config(config);
  const Backends backends = injected ? *injected : make_backends(config);
  const auto templates = load_templates(config);

  const Corpus train = load_or_ingest(config.train_path, Split::Train, config.cache_dir);
  const Corpus validation = load_or_ingest(config.validation_path, Split::Validation, config.cache_dir);
  const Bm25Index index = load_or_build_index(train, config.bm25, config.cache_dir);
  const PromptBuilder builder(templates, config.prompt);
  LlmGateway gateway(backends.llm, gateway_config(config), backends.sleeper);

  json snapshot = config_snapshot(config);
  snapshot["corpus"] = {{"train_hash", to_hex(train.content_hash())},
                        {"train_records", train.size()},
                        {"validation_hash", to_hex(validation.content_hash())},
                        {"validation_records", validation.size()}};

  const auto queries = select_queries(validation, config);
  struct Task {
    std::size_t query_index;
    Strategy strategy;
  };
  std::vector<Task> tasks;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    for (Strategy s : config.strategies) tasks.push_back({qi, s});
  }

  const auto& dir = config.output_dir;
  std::filesystem::create_directories(dir);
  std::unordered_map<std::string, RunRow> done;
  if (std::filesystem::exists(dir / std::string(kRowsFile))) {
    // Finished rows carry no header; their config lives in the footer.
    json footer = json::parse(read_file(dir / std::string(kAggregateFile)), nullptr, false);
    if (footer.is_discarded() || footer.value("config", json()) != snapshot) {
      throw ConfigError("output directory holds a run with a different configuration: " + dir.string());
    }
  }
  for (const auto* name : {&kRowsFile, &kPartialRowsFile}) {
    for (auto& r : read_row_file(dir / std::string(*name), snapshot)) {
      auto key = row_key(r.query_id, r.strategy);
      done.insert_or_assign(std::move(key), std::move(r));
    }
  }
  std::vector<std::optional<RunRow>> slots(tasks.size());
  std::vector<RunRow> carried;
  std::vector<std::size_t> pending;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& q = queries[tasks[t].query_index];
    auto it = done.find(row_key(q.id, tasks[t].strategy));
    if (it != done.end()) {
      slots[t] = it->second;
      carried.push_back(it->second);
    } else {
      pending.push_back(t);
    }
  }
  if (!carried.empty()) {
    spdlog::info("resuming: {} of {} rows already recorded", carried.size(), tasks.size());
  }

  RowWriter writer(dir / std::string(kPartialRowsFile), snapshot, carried);
  const Pipeline pipeline{train, index, builder, gateway, *backends.evaluator, config.eval_mode};

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> claimed{0};
  std::mutex error_mutex;
  std::exception_ptr worker_error;
  const std::size_t limit = config.stop_after_rows.value_or(pending.size());
  auto worker = [&] {
    for (;;) {
      if (claimed.fetch_add(1) >= limit) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= pending.size()) return;
      const auto& task = tasks[pending[i]];
      try {
        RunRow row = process_row(pipeline, queries[task.query_index], task.query_index, task.strategy,
                                 config.k);
        writer.append(row);
        slots[pending[i]] = std::move(row);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!worker_error) worker_error = std::current_exception();
        claimed.store(limit);
        return;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t threads = std::min(config.concurrency, std::max<std::size_t>(1, pending.size()));
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  writer.close();
  if (worker_error) std::rethrow_exception(worker_error);

  RunManifest manifest;
  manifest.config = snapshot;
  manifest.complete = true;
  for (auto& slot : slots) {
    if (slot) {
      manifest.rows.push_back(std::move(*slot));
    } else {
      manifest.complete = false;
    }
  }
  manifest.aggregate = aggregate_rows(manifest.rows, config.strategies);
  if (!manifest.complete) {
    spdlog::info("stopped with {} of {} rows recorded", manifest.rows.size(), tasks.size());
    return manifest;
  }

  std::string rows_text;
  for (const auto& r : manifest.rows) rows_text += row_to_json(r).dump() + "\n";
  json footer = {{"format", "crpo-manifest"},
                 {"version", 1},
                 {"config", snapshot},
                 {"row_count", manifest.rows.size()},
                 {"aggregate", aggregate_json(manifest.aggregate)}};
  write_file_atomic(dir / std::string(kRowsFile), rows_text);
  write_file_atomic(dir / std::string(kAggregateFile), footer.dump(2) + "\n");
  std::filesystem::remove(dir / std::string(kPartialRowsFile));

  std::size_t backend_failures = 0;
  for (const auto& r : manifest.rows) backend_failures += r.backend_failure() ? 1 : 0;
  if (!manifest.rows.empty() &&
      static_cast<double>(backend_failures) >
          config.max_backend_failure_fraction * static_cast<double>(manifest.rows.size())) {
    throw FatalBackend(std::to_string(backend_failures) + " of " + std::to_string(manifest.rows.size()) +
                       " rows lost their backend");
  }
  return manifest;
}

RunManifest load_manifest(const std::filesystem::path& dir) {
  const auto footer_path = dir / std::string(kAggregateFile);
  json footer;
  try {
    footer = json::parse(read_file(footer_path));
  } catch (const json::exception& e) {
    throw IoError("malformed " + footer_path.string() + ": " + e.what());
  } catch (const FileNotFound&) {
    throw IoError("no finished run in " + dir.string() + " (missing " + std::string(kAggregateFile) + ")");
  }
  RunManifest manifest;
  try {
    manifest.config = footer.at("config");
    manifest.aggregate = aggregate_from_json(footer.at("aggregate"));
  } catch (const std::exception& e) {
    throw IoError("malformed " + footer_path.string() + ": " + e.what());
  }
  manifest.rows = read_row_file(dir / std::string(kRowsFile), manifest.config);
  manifest.complete = true;
  return manifest;
}

std::vector<SweepPoint> run_k_sweep(ExperimentConfig config, const std::optional<Backends>& backends) {
  validate_config(config);
  std::vector<Strategy> strategies;
  for (Strategy s : config.strategies) {
    if (uses_retrieval(s)) strategies.push_back(s);
  }
  if (strategies.empty()) throw ConfigError("k sweep needs at least one retrieval-based strategy");
  if (config.k_sweep.empty()) throw ConfigError("k_sweep is empty");

  std::vector<SweepPoint> points;
  const auto root = config.output_dir;
  for (std::size_t k : config.k_sweep) {
    ExperimentConfig run = config;
    run.k = k;
    run.strategies = strategies;
    run.output_dir = root / ("k" + std::to_string(k));
    const auto manifest = run_experiment(run, backends);
    SweepPoint point;
    point.k = k;
    for (const auto& a : manifest.aggregate) point.overall[a.strategy] = a.avg;
    points.push_back(std::move(point));
  }
  write_file_atomic(root / "sweep.json", render_sweep_report(points, ReportFormat::Json));
  write_file_atomic(root / "sweep.csv", render_sweep_report(points, ReportFormat::Csv));
  return points;
}

OptimizeResult optimize_query(const ExperimentConfig& config, std::string_view query, Strategy strategy,
                              const std::optional<Backends>& injected) {
  if (config.k < kMinTopK) throw ConfigError("k=" + std::to_string(config.k) + " is below 5 (we require k >= 5)");
  const Backends backends = injected ? *injected : make_backends(config);
  const auto templates = load_templates(config);
  const Corpus train = load_or_ingest(config.train_path, Split::Train, config.cache_dir);
  const Bm25Index index = load_or_build_index(train, config.bm25, config.cache_dir);
  const PromptBuilder builder(templates, config.prompt);
  LlmGateway gateway(backends.llm, gateway_config(config), backends.sleeper);
  const Pipeline pipeline{train, index, builder, gateway, *backends.evaluator, config.eval_mode};

  RunRow scratch;
  OptimizeResult result;
  result.prompt = construct(pipeline, query, strategy, config.k, scratch);
  result.generation = gateway.generate(gateway.make_request(result.prompt.rendered_text, "optimize"));
  result.optimized_prompt = optimized_text(result.generation, result.extraction_failed);
  return result;
}

}  // namespace crpo
