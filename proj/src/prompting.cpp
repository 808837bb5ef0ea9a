#include "crpo/prompting.hpp"

#include "crpo/error.hpp"
#include "crpo/util.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>

namespace crpo {

namespace {

constexpr std::array<std::string_view, 7> kTemplateNames = {
    "exemplar", "reflect", "integrate", "direct", "cot", "rag", "tps"};

struct StrategyInfo {
  Strategy strategy;
  std::string_view name;
  std::string_view display;
};

constexpr std::array<StrategyInfo, 6> kStrategyInfo = {{
    {Strategy::Direct, "direct", "Direct Generation"},
    {Strategy::CoT, "cot", "Chain-of-Thought (CoT)"},
    {Strategy::Rag, "rag", "Retrieval Augmented Generation (RAG)"},
    {Strategy::CrpoTiered, "crpo_tiered", "CRPO-Tiered Contrastive Reasoning"},
    {Strategy::CrpoMultiMetric, "crpo_multi_metric", "CRPO-Multi-Metric Contrastive Reasoning"},
    {Strategy::TpsTop3, "tps_top3", "Trimaximal-Prompt Selection (TPS)"},
}};

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

std::string scores_text(const MetricScores& scores) {
  std::string out;
  for (Metric m : kAllMetrics) {
    if (!out.empty()) out += ", ";
    out += std::string(metric_name(m)) + "=" + std::to_string(scores[m]);
  }
  return out;
}

void render_into(std::string_view tpl, const std::map<std::string, std::string>& vars,
                 std::string& out) {
  std::size_t pos = 0;
  while (pos < tpl.size()) {
    const auto open = tpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(tpl.substr(pos));
      return;
    }
    out.append(tpl.substr(pos, open - pos));
    const auto close = tpl.find("}}", open + 2);
    if (close == std::string_view::npos) throw TemplateError("unterminated placeholder");
    const std::string_view tag = tpl.substr(open + 2, close - open - 2);
    pos = close + 2;
    if (tag.empty()) throw TemplateError("empty placeholder");
    if (tag.front() == '/') throw TemplateError("unbalanced section end '" + std::string(tag) + "'");
    if (tag.front() == '#') {
      const std::string name(tag.substr(1));
      const std::string end_tag = "{{/" + name + "}}";
      const auto end = tpl.find(end_tag, pos);
      if (end == std::string_view::npos) throw TemplateError("unclosed section '" + name + "'");
      auto it = vars.find(name);
      if (it == vars.end()) throw TemplateError("unknown section variable '" + name + "'");
      if (!it->second.empty()) render_into(tpl.substr(pos, end - pos), vars, out);
      pos = end + end_tag.size();
      continue;
    }
    auto it = vars.find(std::string(tag));
    if (it == vars.end()) throw TemplateError("unknown placeholder '" + std::string(tag) + "'");
    out.append(it->second);
  }
}

}  // namespace

std::string_view strategy_name(Strategy s) {
  return kStrategyInfo[static_cast<std::size_t>(s)].name;
}

std::string_view strategy_display_name(Strategy s) {
  return kStrategyInfo[static_cast<std::size_t>(s)].display;
}

Strategy strategy_from_name(std::string_view name) {
  for (const auto& info : kStrategyInfo) {
    if (info.name == name) return info.strategy;
  }
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

bool uses_retrieval(Strategy s) { return s != Strategy::Direct && s != Strategy::CoT; }

std::string_view tps_ranking_name(TpsRanking r) {
  return r == TpsRanking::ByAverage ? "average" : "bm25";
}

TpsRanking tps_ranking_from_name(std::string_view name) {
  if (name == "average") return TpsRanking::ByAverage;
  if (name == "bm25") return TpsRanking::ByBm25;
  throw ConfigError("unknown tps ranking '" + std::string(name) + "' (expected average or bm25)");
}

std::string render_template(std::string_view tpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  out.reserve(tpl.size() * 2);
  render_into(tpl, vars, out);
  return out;
}

TemplateSet TemplateSet::builtin(std::string_view version) {
  TemplateSet set;
  set.version_ = std::string(version);
  for (const auto& t : detail::embedded_templates()) {
    if (version == t.version) set.templates_.emplace(t.name, t.text);
  }
  if (set.templates_.empty()) {
    throw TemplateError("no built-in templates for version '" + std::string(version) + "'");
  }
  set.check_complete();
  return set;
}

TemplateSet TemplateSet::from_directory(const std::filesystem::path& dir) {
  TemplateSet set;
  set.version_ = dir.filename().string();
  if (set.version_.empty()) set.version_ = dir.parent_path().filename().string();
  for (auto name : kTemplateNames) {
    const auto path = dir / (std::string(name) + ".txt");
    try {
      set.templates_.emplace(std::string(name), read_file(path));
    } catch (const FileNotFound&) {
      throw TemplateError("template directory " + dir.string() + " lacks " + path.filename().string());
    }
  }
  return set;
}

std::vector<std::string> TemplateSet::builtin_versions() {
  std::set<std::string> versions;
  for (const auto& t : detail::embedded_templates()) versions.insert(t.version);
  return {versions.begin(), versions.end()};
}

const std::string& TemplateSet::get(std::string_view name) const {
  auto it = templates_.find(name);
  if (it == templates_.end()) {
    throw TemplateError("template '" + std::string(name) + "' missing from version " + version_);
  }
  return it->second;
}

void TemplateSet::check_complete() const {
  for (auto name : kTemplateNames) get(name);
}

std::string neutralize_sentinels(std::string_view text) {
  std::string out(text);
  replace_all(out, kSentinelBegin, "<<OPTIMIZED_PROMPT>>");
  replace_all(out, kSentinelEnd, "<<END>>");
  replace_all(out, kExemplarIdPrefix, "<!-- exemplar-id=");
  return out;
}

std::size_t count_exemplar_blocks(std::string_view rendered) {
  return extract_exemplar_ids(rendered).size();
}

std::vector<std::string> extract_exemplar_ids(std::string_view rendered) {
  std::vector<std::string> ids;
  std::size_t pos = 0;
  while ((pos = rendered.find(kExemplarIdPrefix, pos)) != std::string_view::npos) {
    if (pos == 0 || rendered[pos - 1] == '\n') {
      const auto start = pos + kExemplarIdPrefix.size();
      const auto end = rendered.find(" -->", start);
      if (end == std::string_view::npos) break;
      ids.emplace_back(rendered.substr(start, end - start));
    }
    pos += kExemplarIdPrefix.size();
  }
  return ids;
}

PromptBuilder::PromptBuilder(TemplateSet templates, PromptOptions options)
    : templates_(std::move(templates)), options_(options) {}

ConstructedPrompt PromptBuilder::start(Strategy strategy, std::string_view query) const {
  ConstructedPrompt p;
  p.strategy = strategy;
  p.query = std::string(query);
  p.template_version = templates_.version();
  return p;
}

std::string PromptBuilder::render_blocks(const std::vector<Block>& blocks, std::size_t first_index,
                                         ConstructedPrompt& prompt) const {
  const auto& tpl = templates_.get("exemplar");
  std::string out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& c = *blocks[i].candidate;
    std::string text = neutralize_sentinels(c.prompt_text);
    if (utf8_length(text) > options_.exemplar_char_budget) {
      text = std::string(utf8_prefix(text, options_.exemplar_char_budget)) +
             std::string(kTruncationMarker);
      prompt.truncated_ids.push_back(c.record_id);
    }
    if (i > 0) out += '\n';
    out += render_template(tpl, {{"id", c.record_id},
                                 {"index", std::to_string(first_index + i)},
                                 {"label", blocks[i].label},
                                 {"text", text},
                                 {"scores", options_.show_scores ? scores_text(c.scores) : ""}});
    prompt.exemplar_ids.push_back(c.record_id);
  }
  return out;
}

ConstructedPrompt PromptBuilder::build_reflect(std::string_view query,
                                               const TierPartition& partition) const {
  if (partition.high.empty()) throw EmptyTier("high tier is empty");
  if (partition.low.empty()) throw EmptyTier("low tier is empty");
  auto prompt = start(Strategy::CrpoTiered, query);
  auto tier_blocks = [](const std::vector<ScoredCandidate>& tier) {
    std::vector<const ScoredCandidate*> sorted;
    for (const auto& c : tier) sorted.push_back(&c);
    std::sort(sorted.begin(), sorted.end(),
              [](auto* a, auto* b) { return quality_before(*a, *b); });
    std::vector<Block> blocks;
    for (auto* c : sorted) blocks.push_back({c, ""});
    return blocks;
  };
  std::size_t index = 1;
  const auto high = render_blocks(tier_blocks(partition.high), index, prompt);
  index += partition.high.size();
  const auto medium = render_blocks(tier_blocks(partition.medium), index, prompt);
  index += partition.medium.size();
  const auto low = render_blocks(tier_blocks(partition.low), index, prompt);
  prompt.rendered_text = render_template(templates_.get("reflect"),
                                         {{"query", neutralize_sentinels(query)},
                                          {"high", high},
                                          {"medium", medium},
                                          {"low", low}});
  return prompt;
}

ConstructedPrompt PromptBuilder::build_integrate(std::string_view query, const MetricBest& best) const {
  for (Metric m : kAllMetrics) {
    if (!best[m]) throw MissingMetric("no winner for " + std::string(metric_name(m)));
  }
  auto prompt = start(Strategy::CrpoMultiMetric, query);
  std::vector<Block> blocks;
  for (Metric m : kAllMetrics) {
    const auto& winner = *best[m];
    auto it = std::find_if(blocks.begin(), blocks.end(),
                           [&](const Block& b) { return b.candidate->record_id == winner.record_id; });
    if (it == blocks.end()) {
      blocks.push_back({&winner, "best for: " + std::string(metric_name(m))});
    } else {
      it->label += ", " + std::string(metric_name(m));
    }
  }
  const auto exemplars = render_blocks(blocks, 1, prompt);
  prompt.rendered_text = render_template(
      templates_.get("integrate"), {{"query", neutralize_sentinels(query)}, {"exemplars", exemplars}});
  return prompt;
}

std::vector<ScoredCandidate> PromptBuilder::tps_selection(
    const std::vector<ScoredCandidate>& retrieved) const {
  std::vector<ScoredCandidate> sorted = retrieved;
  if (options_.tps_ranking == TpsRanking::ByAverage) {
    std::sort(sorted.begin(), sorted.end(), quality_before);
  } else {
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return a.retrieval_rank < b.retrieval_rank;
    });
  }
  if (sorted.size() > 3) sorted.resize(3);
  return sorted;
}

ConstructedPrompt PromptBuilder::build_baseline(std::string_view query, Strategy strategy,
                                                const std::vector<ScoredCandidate>& retrieved) const {
  auto prompt = start(strategy, query);
  const std::string q = neutralize_sentinels(query);
  switch (strategy) {
    case Strategy::Direct:
      prompt.rendered_text = render_template(templates_.get("direct"), {{"query", q}});
      return prompt;
    case Strategy::CoT:
      prompt.rendered_text = render_template(templates_.get("cot"), {{"query", q}});
      return prompt;
    case Strategy::Rag:
    case Strategy::TpsTop3: {
      if (retrieved.empty()) {
        throw MissingRetrieval(std::string(strategy_name(strategy)) + " needs retrieved exemplars");
      }
      std::vector<ScoredCandidate> chosen;
      if (strategy == Strategy::Rag) {
        chosen = retrieved;
        std::sort(chosen.begin(), chosen.end(),
                  [](const auto& a, const auto& b) { return a.retrieval_rank < b.retrieval_rank; });
      } else {
        chosen = tps_selection(retrieved);
      }
      std::vector<Block> blocks;
      for (const auto& c : chosen) blocks.push_back({&c, ""});
      const auto exemplars = render_blocks(blocks, 1, prompt);
      prompt.rendered_text =
          render_template(templates_.get(strategy == Strategy::Rag ? "rag" : "tps"),
                          {{"query", q}, {"exemplars", exemplars}});
      return prompt;
    }
    case Strategy::CrpoTiered:
    case Strategy::CrpoMultiMetric:
      break;
  }
  throw ConfigError(std::string(strategy_name(strategy)) + " is not a baseline strategy");
}

}  // namespace crpo
