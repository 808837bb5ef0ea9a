#include "crpo/corpus.hpp"

#include "crpo/error.hpp"
#include "crpo/util.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <sstream>

namespace crpo {

using nlohmann::json;

std::string_view split_name(Split split) {
  return split == Split::Train ? "train" : "validation";
}

Split split_from_name(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "validation") return Split::Validation;
  throw ConfigError("unknown split '" + std::string(name) + "' (expected train or validation)");
}

Corpus::Corpus(Split split, std::vector<PromptRecord> records, std::uint64_t source_hash)
    : split_(split), records_(std::move(records)), source_hash_(source_hash) {
  if (records_.empty()) throw EmptyCorpus("corpus has no records");
  build_lookup();
}

void Corpus::build_lookup() {
  by_id_.reserve(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if (!by_id_.emplace(r.id, i).second) throw ConfigError("duplicate record id " + r.id);
    auto& ordinals = by_prompt_[r.prompt_text];
    if (ordinals.empty()) first_occurrence_.push_back(i);
    ordinals.push_back(i);
  }
}

std::uint64_t Corpus::content_hash() const {
  std::uint64_t h = fnv1a64(split_name(split_));
  for (const auto& r : records_) {
    h = fnv1a64(r.id, h);
    h = fnv1a64(std::string_view("\x1f", 1), h);
    h = fnv1a64(r.prompt_text, h);
    h = fnv1a64(std::string_view("\x1f", 1), h);
    h = fnv1a64(r.response_text, h);
    for (int v : r.scores.values) {
      const char c = static_cast<char>('0' + v);
      h = fnv1a64(std::string_view(&c, 1), h);
    }
    h = fnv1a64(std::string_view("\x1e", 1), h);
  }
  return h;
}

std::map<Split, std::size_t> Corpus::split_counts() const {
  std::map<Split, std::size_t> counts;
  for (const auto& r : records_) ++counts[r.split];
  return counts;
}

const PromptRecord& Corpus::get(std::string_view id) const {
  auto it = by_id_.find(std::string(id));
  if (it == by_id_.end()) throw UnknownId("unknown record id '" + std::string(id) + "'");
  return records_[it->second];
}

bool Corpus::contains(std::string_view id) const { return by_id_.count(std::string(id)) != 0; }

std::optional<std::size_t> Corpus::ordinal_of(std::string_view id) const {
  auto it = by_id_.find(std::string(id));
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

std::size_t Corpus::representative(std::string_view prompt_text) const {
  auto it = by_prompt_.find(std::string(prompt_text));
  if (it == by_prompt_.end()) throw NoMatch("no record with the given prompt text");
  std::size_t best = it->second.front();
  for (std::size_t ordinal : it->second) {
    // ordinals are ascending, so strict > keeps the lowest row index on ties
    if (records_[ordinal].scores.sum() > records_[best].scores.sum()) best = ordinal;
  }
  return best;
}

std::vector<std::size_t> Corpus::unique_prompt_representatives() const {
  std::vector<std::size_t> out;
  out.reserve(first_occurrence_.size());
  for (std::size_t first : first_occurrence_) out.push_back(representative(records_[first].prompt_text));
  return out;
}

namespace {

std::optional<std::string> read_score(const json& row, Metric m, int& out) {
  const auto key = std::string(metric_name(m));
  auto it = row.find(key);
  if (it == row.end()) return "missing field '" + key + "'";
  const json& v = *it;
  if (v.is_number_integer()) {
    const auto value = v.get<long long>();
    if (value < kMinScore || value > kMaxScore) {
      return "score out of range: " + key + "=" + std::to_string(value);
    }
    out = static_cast<int>(value);
    return std::nullopt;
  }
  if (v.is_number_float()) {
    const double value = v.get<double>();
    if (!std::isfinite(value) || std::floor(value) != value) {
      return "non-integral score: " + key + "=" + v.dump();
    }
    if (value < kMinScore || value > kMaxScore) return "score out of range: " + key + "=" + v.dump();
    out = static_cast<int>(value);
    return std::nullopt;
  }
  return "score is not a number: " + key;
}

}  // namespace

std::optional<std::string> parse_row(std::string_view line, std::string& prompt,
                                     std::string& response, MetricScores& scores) {
  json row = json::parse(line.begin(), line.end(), nullptr, false);
  if (row.is_discarded()) return "invalid JSON";
  if (!row.is_object()) return "row is not a JSON object";

  auto text_field = [&](const char* key, std::string& out) -> std::optional<std::string> {
    auto it = row.find(key);
    if (it == row.end()) return std::string("missing field '") + key + "'";
    if (!it->is_string()) return std::string("field '") + key + "' is not a string";
    out = it->get<std::string>();
    return std::nullopt;
  };
  if (auto err = text_field("prompt", prompt)) return err;
  if (auto err = text_field("response", response)) return err;
  if (trim(prompt).empty()) return "empty prompt";
  for (Metric m : kAllMetrics) {
    if (auto err = read_score(row, m, scores[m])) return err;
  }
  return std::nullopt;
}

IngestResult ingest_text(std::string_view contents, Split split, std::uint64_t source_hash) {
  IngestResult result;
  std::vector<PromptRecord> records;
  std::size_t line_no = 0;
  std::size_t row_index = 0;
  std::size_t pos = 0;
  while (pos <= contents.size()) {
    auto end = contents.find('\n', pos);
    if (end == std::string_view::npos) end = contents.size();
    std::string_view line = contents.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) continue;

    ++result.non_blank_lines;
    PromptRecord rec;
    if (auto err = parse_row(line, rec.prompt_text, rec.response_text, rec.scores)) {
      spdlog::warn("{} line {}: rejected row: {}", split_name(split), line_no, *err);
      result.rejected.push_back({line_no, *err});
    } else {
      rec.split = split;
      rec.row_index = row_index;
      rec.id = std::string(split_name(split)) + ":" + std::to_string(row_index);
      records.push_back(std::move(rec));
    }
    ++row_index;
  }
  if (records.empty()) {
    throw EmptyCorpus("no valid rows (" + std::to_string(result.rejected.size()) + " rejected)");
  }
  result.corpus = Corpus(split, std::move(records), source_hash);
  spdlog::info("ingested {} {} rows ({} rejected)", result.corpus.size(), split_name(split),
               result.rejected.size());
  return result;
}

IngestResult ingest(const std::filesystem::path& source_path, Split split) {
  const std::string contents = read_file(source_path);
  return ingest_text(contents, split, fnv1a64(contents));
}

const PromptRecord& get(const Corpus& corpus, std::string_view id) { return corpus.get(id); }

MetricScores resolve_scores(const Corpus& corpus, std::string_view prompt_text) {
  return corpus[corpus.representative(prompt_text)].scores;
}

void save_corpus_cache(const Corpus& corpus, const std::filesystem::path& path) {
  std::ostringstream out;
  json header = {{"format", "crpo-corpus-cache"},
                 {"version", kCorpusCacheVersion},
                 {"split", split_name(corpus.split())},
                 {"source_hash", to_hex(corpus.source_hash())},
                 {"records", corpus.size()}};
  out << header.dump() << '\n';
  for (const auto& r : corpus.records()) {
    json row = {{"id", r.id},
                {"row", r.row_index},
                {"prompt", r.prompt_text},
                {"response", r.response_text},
                {"scores", r.scores.values}};
    out << row.dump() << '\n';
  }
  write_file_atomic(path, out.str());
}

Corpus load_corpus_cache(const std::filesystem::path& path,
                         std::optional<std::uint64_t> expected_source_hash) {
  const std::string contents = read_file(path);
  std::istringstream in(contents);
  std::string line;
  if (!std::getline(in, line)) throw CacheError("empty cache file " + path.string());
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || !header.is_object() ||
      header.value("format", "") != "crpo-corpus-cache") {
    throw CacheError("not a corpus cache: " + path.string());
  }
  if (header.value("version", -1) != kCorpusCacheVersion) {
    throw CacheError("corpus cache version mismatch in " + path.string() + ": found " +
                     header.value("version", json(nullptr)).dump() + ", expected " +
                     std::to_string(kCorpusCacheVersion));
  }
  const std::string hash_hex = header.value("source_hash", "");
  if (expected_source_hash && hash_hex != to_hex(*expected_source_hash)) {
    throw CacheError("corpus cache is stale: " + path.string());
  }
  const Split split = split_from_name(header.value("split", ""));
  std::vector<PromptRecord> records;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json row = json::parse(line);
      PromptRecord r;
      r.id = row.at("id").get<std::string>();
      r.split = split;
      r.row_index = row.at("row").get<std::size_t>();
      r.prompt_text = row.at("prompt").get<std::string>();
      r.response_text = row.at("response").get<std::string>();
      r.scores.values = row.at("scores").get<std::array<int, kMetricCount>>();
      if (!r.scores.valid()) throw CacheError("invalid scores for " + r.id);
      records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw CacheError("malformed corpus cache " + path.string() + ": " + e.what());
  }
  if (records.size() != header.value("records", std::size_t{0})) {
    throw CacheError("truncated corpus cache " + path.string());
  }
  return Corpus(split, std::move(records), std::stoull(hash_hex, nullptr, 16));
}

std::filesystem::path corpus_cache_path(const std::filesystem::path& cache_dir,
                                        std::uint64_t source_hash, Split split) {
  return cache_dir /
         (std::string(split_name(split)) + "-" + to_hex(source_hash) + ".corpus.jsonl");
}

Corpus load_or_ingest(const std::filesystem::path& source_path, Split split,
                      const std::optional<std::filesystem::path>& cache_dir) {
  if (!cache_dir) return ingest(source_path, split).corpus;
  const std::string contents = read_file(source_path);
  const std::uint64_t hash = fnv1a64(contents);
  const auto cache = corpus_cache_path(*cache_dir, hash, split);
  if (std::filesystem::exists(cache)) {
    try {
      return load_corpus_cache(cache, hash);
    } catch (const CacheError& e) {
      spdlog::warn("ignoring corpus cache: {}", e.what());
    }
  }
  Corpus corpus = ingest_text(contents, split, hash).corpus;
  save_corpus_cache(corpus, cache);
  return corpus;
}

}  // namespace crpo
