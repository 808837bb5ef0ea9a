#include "crpo/error.hpp"
#include "crpo/runner.hpp"
#include "crpo/util.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace crpo {
namespace {

using nlohmann::json;
using testing::fixture_path;
using testing::TempDir;

ExperimentConfig fixture_config(const TempDir& dir, const std::string& name = "run") {
  ExperimentConfig config;
  config.train_path = fixture_path("train.jsonl");
  config.validation_path = fixture_path("validation.jsonl");
  config.output_dir = dir / name;
  config.concurrency = 4;
  return config;
}

std::string file(const std::filesystem::path& p) { return read_file(p); }

class CountingBackend final : public LlmBackend {
 public:
  Completion complete(const GenerationRequest& r) override {
    ++calls;
    return MockLlmBackend().complete(r);
  }
  BackendKind kind() const override { return BackendKind::Mock; }
  std::atomic<int> calls{0};
};

Backends mock_backends(std::shared_ptr<LlmBackend> llm = std::make_shared<MockLlmBackend>()) {
  return {std::move(llm), std::make_shared<MockEvaluator>(), [](auto) {}};
}

TEST(Config, KBelowFiveFailsBeforeAnyBackendCall) {
  TempDir dir;
  auto config = fixture_config(dir);
  config.k = 4;
  auto counting = std::make_shared<CountingBackend>();
  try {
    run_experiment(config, mock_backends(counting));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("we require k >= 5"), std::string::npos);
  }
  EXPECT_EQ(counting->calls, 0);
  EXPECT_FALSE(std::filesystem::exists(config.output_dir));
  config.k = 5;
  EXPECT_NO_THROW(validate_config(config));
}

TEST(Config, SweepIsDeduplicated) {
  ExperimentConfig config;
  config.train_path = "t";
  config.validation_path = "v";
  config.k_sweep = {10, 5, 10, 20, 5};
  validate_config(config);
  EXPECT_EQ(config.k_sweep, (std::vector<std::size_t>{10, 5, 20}));
  config.k_sweep = {5, 3};
  EXPECT_THROW(validate_config(config), ConfigError);
}

TEST(Config, RejectsInconsistentSettings) {
  ExperimentConfig base;
  base.train_path = "t";
  base.validation_path = "v";
  auto c = base;
  c.strategies = {Strategy::Rag, Strategy::Rag};
  EXPECT_THROW(validate_config(c), ConfigError);
  c = base;
  c.generator.backend = "openai";
  EXPECT_THROW(validate_config(c), ConfigError);
  c = base;
  c.evaluator.backend = "grpc";
  EXPECT_THROW(validate_config(c), ConfigError);
  c = base;
  c.concurrency = 0;
  EXPECT_THROW(validate_config(c), ConfigError);
  c = base;
  c.train_path.clear();
  EXPECT_THROW(validate_config(c), ConfigError);
}

TEST(Config, FromJsonFileWithComments) {
  TempDir dir;
  const auto path = dir / "config.json";
  write_file_atomic(path, R"({
    // nested sections override defaults
    "train": "a.jsonl", "validation": "b.jsonl", "k": 15,
    "strategies": ["direct", "crpo_tiered"],
    "generator": {"backend": "openai", "url": "http://localhost:1", "model": "m", "max_attempts": 2},
    "evaluator": {"backend": "http", "url": "http://localhost:2", "initial_backoff_ms": 10},
    "eval_mode": "prompt_pair", "sample_n": 5, "seed": 9,
    "prompt": {"show_scores": true, "tps_ranking": "bm25"},
    "bm25": {"k1": 1.5}
  })");
  const auto c = load_config_file(path);
  EXPECT_EQ(c.train_path, "a.jsonl");
  EXPECT_EQ(c.k, 15u);
  EXPECT_EQ(c.strategies, (std::vector<Strategy>{Strategy::Direct, Strategy::CrpoTiered}));
  EXPECT_EQ(c.generator.backend, "openai");
  EXPECT_EQ(c.generator.retry.max_attempts, 2u);
  EXPECT_EQ(c.evaluator.retry.initial_backoff.count(), 10);
  EXPECT_EQ(c.eval_mode, EvalMode::PromptPair);
  EXPECT_EQ(c.sample_n, 5u);
  EXPECT_TRUE(c.prompt.show_scores);
  EXPECT_EQ(c.prompt.tps_ranking, TpsRanking::ByBm25);
  EXPECT_EQ(c.bm25.k1, 1.5);
  EXPECT_EQ(c.bm25.b, 0.75);

  EXPECT_THROW(config_from_json(json{{"strategies", {"nope"}}}), ConfigError);
  EXPECT_THROW(config_from_json(json{{"k", "ten"}}), ConfigError);
  EXPECT_THROW(load_config_file(dir / "missing.json"), ConfigError);
}

TEST(Config, EnvironmentSelectsRemoteBackends) {
  ::setenv("CRPO_LLM_URL", "http://127.0.0.1:9/v1/chat/completions", 1);
  ::setenv("CRPO_LLM_KEY", "secret", 1);
  ::setenv("CRPO_EVAL_URL", "http://127.0.0.1:9", 1);
  ExperimentConfig c;
  apply_environment(c);
  ::unsetenv("CRPO_LLM_URL");
  ::unsetenv("CRPO_LLM_KEY");
  ::unsetenv("CRPO_EVAL_URL");
  EXPECT_EQ(c.generator.backend, "openai");
  EXPECT_EQ(c.generator.api_key, "secret");
  EXPECT_EQ(c.evaluator.backend, "http");
  EXPECT_EQ(config_snapshot(c).dump().find("secret"), std::string::npos);
}

TEST(Runner, MockRunCoversEveryQueryAndStrategy) {
  TempDir dir;
  const auto manifest = run_experiment(fixture_config(dir), mock_backends());
  EXPECT_TRUE(manifest.complete);
  // 22 validation rows, two duplicated prompts.
  ASSERT_EQ(manifest.rows.size(), 20u * 6u);
  for (const auto& row : manifest.rows) {
    EXPECT_TRUE(row.ok) << row.query_id << " " << strategy_name(row.strategy) << ": " << row.error_message;
    ASSERT_TRUE(row.comparison.has_value());
    EXPECT_FALSE(row.optimized_prompt.empty());
  }
  ASSERT_EQ(manifest.aggregate.size(), 6u);
  for (const auto& a : manifest.aggregate) {
    EXPECT_EQ(a.rows, 20u);
    EXPECT_GE(a.avg, 0.0);
    EXPECT_LE(a.avg, 1.0);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "rows.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir / "run" / "aggregate.json"));
  EXPECT_FALSE(std::filesystem::exists(dir / "run" / "rows.partial.jsonl"));
}

TEST(Runner, ExemplarProvenanceResolvesToTrainRecords) {
  TempDir dir;
  const auto manifest = run_experiment(fixture_config(dir), mock_backends());
  const auto train = ingest(fixture_path("train.jsonl"), Split::Train).corpus;
  for (const auto& row : manifest.rows) {
    std::set<std::string> ids(row.exemplar_ids.begin(), row.exemplar_ids.end());
    for (const auto& id : row.exemplar_ids) EXPECT_TRUE(train.contains(id)) << id;
    switch (row.strategy) {
      case Strategy::Direct:
      case Strategy::CoT:
        EXPECT_TRUE(row.exemplar_ids.empty());
        EXPECT_EQ(row.k, 0u);
        break;
      case Strategy::Rag:
      case Strategy::CrpoTiered:
        EXPECT_EQ(row.exemplar_ids.size(), 10u);
        break;
      case Strategy::CrpoMultiMetric:
        EXPECT_GE(row.exemplar_ids.size(), 1u);
        EXPECT_LE(row.exemplar_ids.size(), 5u);
        for (const auto& [metric, id] : row.selection.at("winners").items()) EXPECT_TRUE(ids.count(id));
        break;
      case Strategy::TpsTop3:
        EXPECT_EQ(row.exemplar_ids.size(), 3u);
        break;
    }
    if (row.strategy == Strategy::CrpoTiered) {
      std::size_t total = 0;
      for (const char* tier : {"high", "medium", "low"}) {
        for (const auto& id : row.selection.at(tier)) EXPECT_TRUE(ids.count(id.get<std::string>()));
        total += row.selection.at(tier).size();
      }
      EXPECT_EQ(total, 10u);
      EXPECT_EQ(row.selection.at("high").size(), 4u);
    }
  }
}

TEST(Runner, RerunIsByteIdentical) {
  TempDir dir;
  auto a = fixture_config(dir, "a");
  auto b = fixture_config(dir, "b");
  b.concurrency = 1;
  run_experiment(a, mock_backends());
  run_experiment(b, mock_backends());
  EXPECT_EQ(file(a.output_dir / "rows.jsonl"), file(b.output_dir / "rows.jsonl"));
  EXPECT_EQ(file(a.output_dir / "aggregate.json"), file(b.output_dir / "aggregate.json"));
}

TEST(Runner, ResumesAfterInterruption) {
  TempDir dir;
  auto full = fixture_config(dir, "full");
  run_experiment(full, mock_backends());

  auto part = fixture_config(dir, "part");
  part.stop_after_rows = 60;
  const auto stopped = run_experiment(part, mock_backends());
  EXPECT_FALSE(stopped.complete);
  EXPECT_EQ(stopped.rows.size(), 60u);
  const auto partial = part.output_dir / "rows.partial.jsonl";
  ASSERT_TRUE(std::filesystem::exists(partial));
  EXPECT_FALSE(std::filesystem::exists(part.output_dir / "rows.jsonl"));
  // Simulate a crash in the middle of a write.
  {
    std::ofstream out(partial, std::ios::app);
    out << R"({"query_id":"validation:3","strat)";
  }

  part.stop_after_rows.reset();
  const auto resumed = run_experiment(part, mock_backends());
  EXPECT_TRUE(resumed.complete);
  EXPECT_EQ(file(part.output_dir / "rows.jsonl"), file(full.output_dir / "rows.jsonl"));
  EXPECT_EQ(file(part.output_dir / "aggregate.json"), file(full.output_dir / "aggregate.json"));
}

TEST(Runner, ResumeDoesNotRedoFinishedRows) {
  TempDir dir;
  auto config = fixture_config(dir);
  config.strategies = {Strategy::Direct};
  run_experiment(config, mock_backends());
  auto counting = std::make_shared<CountingBackend>();
  run_experiment(config, mock_backends(counting));
  EXPECT_EQ(counting->calls, 0);
}

TEST(Runner, ChangedConfigDoesNotReuseRows) {
  TempDir dir;
  auto config = fixture_config(dir);
  config.strategies = {Strategy::Direct, Strategy::Rag};
  config.stop_after_rows = 4;
  run_experiment(config, mock_backends());
  config.k = 5;
  EXPECT_THROW(run_experiment(config, mock_backends()), ConfigError);

  auto finished = fixture_config(dir, "finished");
  finished.strategies = {Strategy::Direct};
  run_experiment(finished, mock_backends());
  finished.eval_mode = EvalMode::PromptPair;
  EXPECT_THROW(run_experiment(finished, mock_backends()), ConfigError);
}

TEST(Runner, SampleIsSeededSubset) {
  TempDir dir;
  auto a = fixture_config(dir, "a");
  a.strategies = {Strategy::Direct};
  a.sample_n = 7;
  a.seed = 42;
  auto b = a;
  b.output_dir = dir / "b";
  auto c = a;
  c.output_dir = dir / "c";
  c.seed = 43;
  const auto ra = run_experiment(a, mock_backends());
  const auto rb = run_experiment(b, mock_backends());
  const auto rc = run_experiment(c, mock_backends());
  ASSERT_EQ(ra.rows.size(), 7u);
  std::vector<std::string> ids_a, ids_b, ids_c;
  for (const auto& r : ra.rows) ids_a.push_back(r.query_id);
  for (const auto& r : rb.rows) ids_b.push_back(r.query_id);
  for (const auto& r : rc.rows) ids_c.push_back(r.query_id);
  EXPECT_EQ(ids_a, ids_b);
  EXPECT_NE(ids_a, ids_c);
  EXPECT_TRUE(std::is_sorted(ra.rows.begin(), ra.rows.end(),
                             [](const RunRow& x, const RunRow& y) { return x.query_index < y.query_index; }));
}

class RejectingBackend final : public LlmBackend {
 public:
  explicit RejectingBackend(bool auth) : auth_(auth) {}
  Completion complete(const GenerationRequest& r) override {
    if (auth_) throw AuthError("401");
    if (r.rendered_text.find("Reference prompt") != std::string::npos) throw ContextOverflow("too long");
    return MockLlmBackend().complete(r);
  }
  BackendKind kind() const override { return BackendKind::Remote; }

 private:
  bool auth_;
};

TEST(Runner, PartialFailuresAreRecordedPerRow) {
  TempDir dir;
  auto config = fixture_config(dir);
  const auto manifest = run_experiment(config, mock_backends(std::make_shared<RejectingBackend>(false)));
  EXPECT_TRUE(manifest.complete);
  for (const auto& row : manifest.rows) {
    if (uses_retrieval(row.strategy)) {
      EXPECT_FALSE(row.ok);
      EXPECT_EQ(row.failed_stage, "generation");
      EXPECT_EQ(row.error_kind, "ContextOverflow");
      EXPECT_FALSE(row.exemplar_ids.empty());
    } else {
      EXPECT_TRUE(row.ok);
    }
  }
  for (const auto& a : manifest.aggregate) {
    if (uses_retrieval(a.strategy)) {
      EXPECT_EQ(a.rows, 0u);
      EXPECT_EQ(a.excluded, 20u);
      EXPECT_TRUE(std::isnan(a.avg));
    }
  }
  const auto md = render_report(load_manifest(config.output_dir), ReportFormat::Markdown);
  EXPECT_NE(md.find("n/a"), std::string::npos);
  EXPECT_NE(md.find("rag 0/20"), std::string::npos);
}

TEST(Runner, TooManyBackendFailuresIsFatal) {
  TempDir dir;
  auto config = fixture_config(dir);
  config.strategies = {Strategy::Direct, Strategy::CoT};
  EXPECT_THROW(run_experiment(config, mock_backends(std::make_shared<RejectingBackend>(true))), FatalBackend);
  // The manifest is still written for inspection.
  const auto manifest = load_manifest(config.output_dir);
  EXPECT_EQ(manifest.rows.size(), 40u);
  EXPECT_EQ(manifest.rows[0].error_kind, "AuthError");
}

class NoSentinelBackend final : public LlmBackend {
 public:
  Completion complete(const GenerationRequest&) override { return {"  Just answer concisely.  ", {}}; }
  BackendKind kind() const override { return BackendKind::Mock; }
};

TEST(Runner, MissingSentinelsFallBackToRawText) {
  TempDir dir;
  auto config = fixture_config(dir);
  config.strategies = {Strategy::CrpoTiered};
  const auto manifest = run_experiment(config, mock_backends(std::make_shared<NoSentinelBackend>()));
  for (const auto& row : manifest.rows) {
    EXPECT_TRUE(row.ok);
    EXPECT_TRUE(row.extraction_failed);
    EXPECT_EQ(row.optimized_prompt, "Just answer concisely.");
  }
}

TEST(Rows, JsonRoundTrip) {
  TempDir dir;
  auto config = fixture_config(dir);
  config.strategies = {Strategy::CrpoMultiMetric, Strategy::Direct};
  const auto manifest = run_experiment(config, mock_backends());
  for (const auto& row : manifest.rows) {
    const auto doc = row_to_json(row);
    EXPECT_EQ(row_to_json(row_from_json(doc)), doc);
  }
  EXPECT_THROW(row_from_json(json{{"query_id", 3}}), IoError);
}

TEST(Rows, LoadManifestMatchesRun) {
  TempDir dir;
  auto config = fixture_config(dir);
  config.strategies = {Strategy::Rag, Strategy::TpsTop3};
  const auto manifest = run_experiment(config, mock_backends());
  const auto loaded = load_manifest(config.output_dir);
  EXPECT_EQ(loaded.rows.size(), manifest.rows.size());
  EXPECT_EQ(loaded.config, manifest.config);
  for (auto f : {ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Json}) {
    EXPECT_EQ(render_report(loaded, f), render_report(manifest, f));
  }
  EXPECT_THROW(load_manifest(dir / "nothing"), IoError);
}

TEST(Report, CsvHeaderAndRows) {
  TempDir dir;
  auto config = fixture_config(dir);
  const auto csv = render_report(run_experiment(config, mock_backends()), ReportFormat::Csv);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "strategy,helpfulness,correctness,coherence,complexity,verbosity,avg");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6);
  }
  EXPECT_EQ(rows, 6u);
}

TEST(Report, MarkdownHasOneBodyRowPerStrategy) {
  TempDir dir;
  auto config = fixture_config(dir);
  config.strategies = {Strategy::Direct, Strategy::CrpoTiered};
  const auto md = render_report(run_experiment(config, mock_backends()), ReportFormat::Markdown);
  std::istringstream in(md);
  std::string line;
  std::vector<std::string> table;
  while (std::getline(in, line)) {
    if (line.rfind("|", 0) == 0) table.push_back(line);
  }
  ASSERT_EQ(table.size(), 4u);
  EXPECT_EQ(table[0], "| Strategy | Helpfulness | Correctness | Coherence | Complexity | Verbosity | Avg. Score |");
  EXPECT_EQ(table[2].rfind("| Direct Generation |", 0), 0u);
  EXPECT_EQ(table[3].rfind("| CRPO-Tiered Contrastive Reasoning |", 0), 0u);
}

TEST(Report, JsonShape) {
  TempDir dir;
  const auto doc = json::parse(render_report(run_experiment(fixture_config(dir), mock_backends()), ReportFormat::Json));
  EXPECT_EQ(doc["columns"],
            json({"strategy", "helpfulness", "correctness", "coherence", "complexity", "verbosity", "avg"}));
  ASSERT_EQ(doc["table"].size(), 6u);
  EXPECT_EQ(doc["table"][0].size(), 7u);
  EXPECT_EQ(doc["ablation_tps"].size(), 3u);
  EXPECT_EQ(doc["k"], 10);
  EXPECT_EQ(doc["template_version"], "v1");
}

TEST(Report, GoldenMarkdownFromMockRun) {
  TempDir dir;
  const auto md = render_report(run_experiment(fixture_config(dir), mock_backends()), ReportFormat::Markdown);
  const auto path = testing::golden_dir() / "report.md";
  if (std::getenv("CRPO_UPDATE_GOLDENS") != nullptr) write_file_atomic(path, md);
  EXPECT_EQ(md, read_file(path));
}

TEST(Report, FormatNames) {
  EXPECT_EQ(report_format_from_name("md"), ReportFormat::Markdown);
  EXPECT_EQ(report_format_from_name("csv"), ReportFormat::Csv);
  EXPECT_THROW(report_format_from_name("xlsx"), ConfigError);
}

TEST(Sweep, TwoPointsPerRetrievalStrategy) {
  TempDir dir;
  auto config = fixture_config(dir);
  config.k_sweep = {5, 10, 5};
  const auto points = run_k_sweep(config, mock_backends());
  ASSERT_EQ(points.size(), 2u);
  EXPECT_EQ(points[0].k, 5u);
  EXPECT_EQ(points[1].k, 10u);
  for (const auto& p : points) {
    EXPECT_EQ(p.overall.size(), 4u);
    EXPECT_FALSE(p.overall.count(Strategy::Direct));
  }
  auto again = fixture_config(dir, "again");
  again.k_sweep = {5, 10};
  run_k_sweep(again, mock_backends());
  EXPECT_EQ(file(config.output_dir / "sweep.json"), file(dir / "again" / "sweep.json"));
  EXPECT_TRUE(std::filesystem::exists(config.output_dir / "k5" / "aggregate.json"));
}

TEST(Optimize, SingleQuery) {
  TempDir dir;
  auto config = fixture_config(dir);
  const auto r = optimize_query(config, "How do I make pizza dough", Strategy::CrpoTiered, mock_backends());
  EXPECT_EQ(r.prompt.exemplar_ids.size(), 10u);
  EXPECT_FALSE(r.extraction_failed);
  EXPECT_NE(r.optimized_prompt.find("pizza dough"), std::string::npos);
  config.k = 3;
  EXPECT_THROW(optimize_query(config, "q", Strategy::Rag, mock_backends()), ConfigError);
}

}  // namespace
}  // namespace crpo
