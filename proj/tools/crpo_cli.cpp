#include "crpo/corpus.hpp"
#include "crpo/error.hpp"
#include "crpo/evaluation.hpp"
#include "crpo/runner.hpp"
#include "crpo/util.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitBackend = 3;

// Flags shared by run, sweep and optimize. Unset flags leave the config alone.
struct ExperimentFlags {
  std::string config_path;
  std::optional<std::string> train, validation, output, cache_dir, template_dir, template_version;
  std::optional<std::size_t> k, concurrency, sample_n, max_tokens, max_attempts;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategies, k_sweep;
  std::optional<std::string> llm_backend, llm_url, llm_model, eval_backend, eval_url, eval_mode, tps_ranking;
  std::optional<std::size_t> exemplar_budget;
  bool show_scores = false;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "JSON config file");
    app->add_option("--train", train, "Train split (line-JSON)");
    app->add_option("--validation", validation, "Validation split (line-JSON)");
    app->add_option("-o,--output", output, "Output directory");
    app->add_option("--cache-dir", cache_dir, "Corpus and index cache directory");
    app->add_option("-k,--k", k, "Retrieved reference prompts per query (>= 5)");
    app->add_option("--k-sweep", k_sweep, "Comma-separated k values for the sweep");
    app->add_option("--strategies", strategies,
                    "Comma-separated: direct,cot,rag,crpo_tiered,crpo_multi_metric,tps_top3");
    app->add_option("--concurrency", concurrency, "In-flight request cap");
    app->add_option("--sample-n", sample_n, "Evaluate a seeded random subset of queries");
    app->add_option("--seed", seed, "Seed for --sample-n");
    app->add_option("--llm-backend", llm_backend, "mock or openai");
    app->add_option("--llm-url", llm_url, "Chat completions endpoint");
    app->add_option("--llm-model", llm_model, "Model name");
    app->add_option("--max-tokens", max_tokens, "Generation token limit");
    app->add_option("--max-attempts", max_attempts, "Attempts per generation request");
    app->add_option("--eval-backend", eval_backend, "mock or http");
    app->add_option("--eval-url", eval_url, "Reward-model service origin");
    app->add_option("--eval-mode", eval_mode, "response or prompt_pair");
    app->add_option("--template-version", template_version, "Pinned template version");
    app->add_option("--template-dir", template_dir, "Load templates from this directory");
    app->add_option("--exemplar-char-budget", exemplar_budget, "Code points kept per exemplar");
    app->add_option("--tps-ranking", tps_ranking, "average or bm25");
    app->add_flag("--show-scores", show_scores, "Show annotation scores next to exemplars");
  }

  crpo::ExperimentConfig build() const {
    crpo::ExperimentConfig config;
    if (!config_path.empty()) config = crpo::load_config_file(config_path);
    crpo::apply_environment(config);
    if (train) config.train_path = *train;
    if (validation) config.validation_path = *validation;
    if (output) config.output_dir = *output;
    if (cache_dir) config.cache_dir = *cache_dir;
    if (k) config.k = *k;
    if (k_sweep) {
      config.k_sweep.clear();
      for (const auto& item : split_list(*k_sweep)) {
        try {
          config.k_sweep.push_back(std::stoul(item));
        } catch (const std::exception&) {
          throw crpo::ConfigError("bad k_sweep value '" + item + "'");
        }
      }
    }
    if (strategies) {
      config.strategies.clear();
      for (const auto& s : split_list(*strategies)) config.strategies.push_back(crpo::strategy_from_name(s));
    }
    if (concurrency) config.concurrency = *concurrency;
    if (sample_n) config.sample_n = *sample_n;
    if (seed) config.seed = *seed;
    if (llm_backend) config.generator.backend = *llm_backend;
    if (llm_url) {
      config.generator.url = *llm_url;
      if (!llm_backend && config.generator.backend == "mock") config.generator.backend = "openai";
    }
    if (llm_model) config.generator.model = *llm_model;
    if (max_tokens) config.generator.max_tokens = *max_tokens;
    if (max_attempts) config.generator.retry.max_attempts = *max_attempts;
    if (eval_backend) config.evaluator.backend = *eval_backend;
    if (eval_url) {
      config.evaluator.url = *eval_url;
      if (!eval_backend && config.evaluator.backend == "mock") config.evaluator.backend = "http";
    }
    if (eval_mode) config.eval_mode = crpo::eval_mode_from_name(*eval_mode);
    if (template_version) config.template_version = *template_version;
    if (template_dir) config.template_dir = *template_dir;
    if (exemplar_budget) config.prompt.exemplar_char_budget = *exemplar_budget;
    if (tps_ranking) config.prompt.tps_ranking = crpo::tps_ranking_from_name(*tps_ranking);
    if (show_scores) config.prompt.show_scores = true;
    return config;
  }

  static std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
      item = crpo::trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }
};

void write_reports(const crpo::RunManifest& manifest, const std::filesystem::path& dir) {
  for (auto format : {crpo::ReportFormat::Csv, crpo::ReportFormat::Markdown, crpo::ReportFormat::Json}) {
    crpo::emit_report(manifest, format, dir / ("report" + std::string(crpo::report_format_extension(format))));
  }
}

int cmd_ingest(const std::string& input, const std::string& split, const std::string& cache) {
  auto result = crpo::ingest(input, crpo::split_from_name(split));
  nlohmann::json summary = {{"split", split},
                            {"records", result.corpus.size()},
                            {"rejected", result.rejected.size()},
                            {"non_blank_lines", result.non_blank_lines},
                            {"source_hash", crpo::to_hex(result.corpus.source_hash())}};
  if (!cache.empty()) {
    const auto path = crpo::corpus_cache_path(cache, result.corpus.source_hash(), result.corpus.split());
    crpo::save_corpus_cache(result.corpus, path);
    summary["cache"] = path.string();
  }
  std::cout << summary.dump() << '\n';
  return kExitOk;
}

int cmd_index(const std::string& train, const std::string& cache, double k1, double b) {
  const auto corpus = crpo::load_or_ingest(train, crpo::Split::Train, cache);
  const crpo::Bm25Params params{k1, b};
  const auto index = crpo::load_or_build_index(corpus, params, cache);
  nlohmann::json summary = {{"documents", index.doc_count()},
                            {"terms", index.postings.size()},
                            {"avg_doc_length", index.avg_doc_length},
                            {"cache", crpo::index_cache_path(cache, index.corpus_hash, params).string()}};
  std::cout << summary.dump() << '\n';
  return kExitOk;
}

int cmd_serve_check(const crpo::ExperimentConfig& config) {
  int status = kExitOk;
  auto backends = crpo::make_backends(config);
  try {
    crpo::GatewayConfig g;
    g.model_name = config.generator.model;
    g.max_tokens = 8;
    g.retry.max_attempts = 1;
    crpo::LlmGateway gateway(backends.llm, g);
    auto result = gateway.generate(gateway.make_request("Reply with the single word: pong", "serve-check"));
    std::cout << "llm: ok (" << crpo::backend_kind_name(result.backend) << ", " << result.latency.count()
              << " ms)\n";
  } catch (const crpo::Error& e) {
    std::cout << "llm: FAILED " << e.kind() << ": " << e.what() << '\n';
    status = kExitBackend;
  }
  if (auto* http = dynamic_cast<crpo::HttpEvaluator*>(backends.evaluator.get())) {
    try {
      const auto h = http->health();
      std::cout << "evaluator: " << h.status << " (" << h.model_id << ")\n";
      if (h.status != "ok") status = kExitBackend;
    } catch (const crpo::Error& e) {
      std::cout << "evaluator: FAILED " << e.kind() << ": " << e.what() << '\n';
      status = kExitBackend;
    }
  } else {
    std::cout << "evaluator: ok (mock)\n";
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-augmented contrastive prompt optimization"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress to stderr");

  std::string ingest_input, ingest_split = "train", ingest_cache;
  auto* ingest = app.add_subcommand("ingest", "Validate a split file and optionally cache it");
  ingest->add_option("input", ingest_input, "Line-JSON split file")->required();
  ingest->add_option("--split", ingest_split, "train or validation");
  ingest->add_option("--cache-dir", ingest_cache, "Write the parsed corpus cache here");

  std::string index_train, index_cache;
  double k1 = 1.2, b = 0.75;
  auto* index = app.add_subcommand("index", "Build and cache the BM25 index of a train split");
  index->add_option("train", index_train, "Train split file")->required();
  index->add_option("--cache-dir", index_cache, "Cache directory")->required();
  index->add_option("--k1", k1, "BM25 saturation constant");
  index->add_option("--b", b, "BM25 length normalization");

  ExperimentFlags optimize_flags;
  std::string query, strategy = "crpo_tiered";
  bool print_meta_prompt = false;
  auto* optimize = app.add_subcommand("optimize", "Optimize one query and print the optimized prompt");
  optimize_flags.attach(optimize);
  optimize->add_option("-q,--query", query, "Query to optimize")->required();
  optimize->add_option("-s,--strategy", strategy, "Strategy");
  optimize->add_flag("--print-meta-prompt", print_meta_prompt, "Also print the rendered meta-prompt to stderr");

  ExperimentFlags run_flags;
  auto* run = app.add_subcommand("run", "Run an experiment over the validation queries");
  run_flags.attach(run);

  ExperimentFlags sweep_flags;
  auto* sweep = app.add_subcommand("sweep", "Run the retrieval-size sweep");
  sweep_flags.attach(sweep);

  std::string report_dir, report_format = "markdown", report_out;
  auto* report = app.add_subcommand("report", "Render the aggregate table of a finished run");
  report->add_option("run_dir", report_dir, "Run output directory")->required();
  report->add_option("-f,--format", report_format, "csv, markdown or json");
  report->add_option("--out", report_out, "Write to this file instead of stdout");

  ExperimentFlags check_flags;
  auto* check = app.add_subcommand("serve-check", "Ping the configured generator and evaluator");
  check_flags.attach(check);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  spdlog::set_default_logger(spdlog::stderr_logger_mt("crpo"));
  spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::warn);

  try {
    if (*ingest) return cmd_ingest(ingest_input, ingest_split, ingest_cache);
    if (*index) return cmd_index(index_train, index_cache, k1, b);
    if (*optimize) {
      auto config = optimize_flags.build();
      const auto result = crpo::optimize_query(config, query, crpo::strategy_from_name(strategy));
      if (print_meta_prompt) std::cerr << result.prompt.rendered_text << '\n';
      if (result.extraction_failed) spdlog::warn("no sentinel-delimited prompt in the reply; printing raw text");
      std::cout << result.optimized_prompt << '\n';
      return kExitOk;
    }
    if (*run) {
      auto config = run_flags.build();
      const auto manifest = crpo::run_experiment(config);
      if (manifest.complete) write_reports(manifest, config.output_dir);
      std::cout << crpo::render_report(manifest, crpo::ReportFormat::Markdown);
      return kExitOk;
    }
    if (*sweep) {
      const auto points = crpo::run_k_sweep(sweep_flags.build());
      std::cout << crpo::render_sweep_report(points, crpo::ReportFormat::Markdown);
      return kExitOk;
    }
    if (*report) {
      const auto manifest = crpo::load_manifest(report_dir);
      const auto format = crpo::report_format_from_name(report_format);
      if (report_out.empty()) {
        std::cout << crpo::render_report(manifest, format);
      } else {
        crpo::emit_report(manifest, format, report_out);
      }
      return kExitOk;
    }
    if (*check) return cmd_serve_check(check_flags.build());
  } catch (const crpo::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const crpo::KTooSmall& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const crpo::FatalBackend& e) {
    std::cerr << "backend failure: " << e.what() << '\n';
    return kExitBackend;
  } catch (const crpo::Error& e) {
    std::cerr << e.kind() << ": " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
