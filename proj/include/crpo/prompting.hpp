#pragma once

#include "crpo/selection.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace crpo {

/// Every experiment arm: three baselines, the two contrastive variants and
/// the top-3 selection ablation.
enum class Strategy { Direct, CoT, Rag, CrpoTiered, CrpoMultiMetric, TpsTop3 };

inline constexpr std::array<Strategy, 6> kAllStrategies = {
    Strategy::Direct,     Strategy::CoT,           Strategy::Rag,
    Strategy::CrpoTiered, Strategy::CrpoMultiMetric, Strategy::TpsTop3};

std::string_view strategy_name(Strategy s);
/// Row label used in markdown reports.
std::string_view strategy_display_name(Strategy s);
/// Throws ConfigError.
Strategy strategy_from_name(std::string_view name);
bool uses_retrieval(Strategy s);

inline constexpr std::string_view kSentinelBegin = "<<<OPTIMIZED_PROMPT>>>";
inline constexpr std::string_view kSentinelEnd = "<<<END>>>";
inline constexpr std::string_view kDefaultTemplateVersion = "v1";
inline constexpr std::string_view kTruncationMarker = " [...truncated]";
inline constexpr std::string_view kExemplarIdPrefix = "<!-- exemplar id=";

/// How the top-3 ablation ranks retrieved prompts.
enum class TpsRanking { ByAverage, ByBm25 };

std::string_view tps_ranking_name(TpsRanking r);
TpsRanking tps_ranking_from_name(std::string_view name);

struct PromptOptions {
  std::size_t exemplar_char_budget = 4000;  // code points per exemplar
  bool show_scores = false;
  TpsRanking tps_ranking = TpsRanking::ByAverage;
};

struct ConstructedPrompt {
  Strategy strategy = Strategy::Direct;
  std::string query;
  std::vector<std::string> exemplar_ids;
  std::vector<std::string> truncated_ids;
  std::string rendered_text;
  std::string template_version;
};

namespace detail {
struct EmbeddedTemplate {
  const char* version;
  const char* name;
  const char* text;
};
const std::vector<EmbeddedTemplate>& embedded_templates();
}  // namespace detail

/// Substitutes `{{name}}` placeholders. `{{#name}}...{{/name}}` sections are
/// kept only when `name` maps to a non-empty value. Throws TemplateError on
/// an unknown placeholder or an unbalanced section.
std::string render_template(std::string_view tpl, const std::map<std::string, std::string>& vars);

/// The named templates of one version: exemplar, reflect, integrate,
/// direct, cot, rag, tps.
class TemplateSet {
 public:
  /// Throws TemplateError when the version is not shipped or incomplete.
  static TemplateSet builtin(std::string_view version = kDefaultTemplateVersion);
  /// Loads `<dir>/<name>.txt`; the version label is the directory name.
  static TemplateSet from_directory(const std::filesystem::path& dir);
  static std::vector<std::string> builtin_versions();

  const std::string& version() const { return version_; }
  /// Throws TemplateError.
  const std::string& get(std::string_view name) const;

 private:
  void check_complete() const;

  std::string version_;
  std::map<std::string, std::string, std::less<>> templates_;
};

/// Assembles the meta-prompt for each strategy. Rendering is a pure
/// function of (strategy, query, exemplars, templates, options).
class PromptBuilder {
 public:
  explicit PromptBuilder(TemplateSet templates = TemplateSet::builtin(), PromptOptions options = {});

  const TemplateSet& templates() const { return templates_; }
  const PromptOptions& options() const { return options_; }

  /// Throws EmptyTier when the high or low tier is empty.
  ConstructedPrompt build_reflect(std::string_view query, const TierPartition& partition) const;

  /// One block per distinct winner, labeled with every metric it won, in
  /// metric order of first win. Throws MissingMetric.
  ConstructedPrompt build_integrate(std::string_view query, const MetricBest& best) const;

  /// Direct, CoT, Rag or TpsTop3. Rag uses every retrieved candidate in
  /// rank order; TpsTop3 uses the three best under the configured ranking.
  /// Throws MissingRetrieval when Rag/TpsTop3 get no candidates and
  /// ConfigError for a contrastive strategy.
  ConstructedPrompt build_baseline(std::string_view query, Strategy strategy,
                                   const std::vector<ScoredCandidate>& retrieved) const;

  /// The three exemplars the top-3 ablation uses, best first.
  std::vector<ScoredCandidate> tps_selection(const std::vector<ScoredCandidate>& retrieved) const;

 private:
  struct Block {
    const ScoredCandidate* candidate;
    std::string label;
  };
  std::string render_blocks(const std::vector<Block>& blocks, std::size_t first_index,
                            ConstructedPrompt& prompt) const;
  ConstructedPrompt start(Strategy strategy, std::string_view query) const;

  TemplateSet templates_;
  PromptOptions options_;
};

/// Replaces any sentinel marker inside embedded text so the rendered prompt
/// carries each sentinel exactly once.
std::string neutralize_sentinels(std::string_view text);

/// Counts exemplar provenance lines in a rendered prompt.
std::size_t count_exemplar_blocks(std::string_view rendered);
/// Record ids from exemplar provenance lines, in order of appearance.
std::vector<std::string> extract_exemplar_ids(std::string_view rendered);

}  // namespace crpo
