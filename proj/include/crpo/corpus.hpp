#pragma once

#include "crpo/metrics.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace crpo {

enum class Split { Train, Validation };

std::string_view split_name(Split split);
/// Throws ConfigError on an unknown name.
Split split_from_name(std::string_view name);

struct PromptRecord {
  std::string id;  // "<split>:<row index>"
  Split split = Split::Train;
  std::size_t row_index = 0;
  std::string prompt_text;
  std::string response_text;
  MetricScores scores;

  friend bool operator==(const PromptRecord&, const PromptRecord&) = default;
};

/// A rejected input row. `line_no` is 1-based and counts blank lines.
struct MalformedRow {
  std::size_t line_no = 0;
  std::string reason;
};

/// Immutable, ordered collection of records from one split file.
class Corpus {
 public:
  Corpus() = default;
  /// Throws EmptyCorpus when `records` is empty and ConfigError on duplicate ids.
  Corpus(Split split, std::vector<PromptRecord> records, std::uint64_t source_hash = 0);

  Split split() const { return split_; }
  const std::vector<PromptRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const PromptRecord& operator[](std::size_t ordinal) const { return records_[ordinal]; }

  /// Hash of the source file bytes (0 when built in memory).
  std::uint64_t source_hash() const { return source_hash_; }
  /// Hash over every record field, independent of where the corpus came from.
  std::uint64_t content_hash() const;

  std::map<Split, std::size_t> split_counts() const;

  /// Throws UnknownId.
  const PromptRecord& get(std::string_view id) const;
  bool contains(std::string_view id) const;
  std::optional<std::size_t> ordinal_of(std::string_view id) const;

  /// Ordinal of the record chosen to represent `prompt_text`: highest
  /// average score, lowest row index on ties. Throws NoMatch.
  std::size_t representative(std::string_view prompt_text) const;

  /// One representative ordinal per distinct prompt text, ordered by the
  /// first occurrence of that text.
  std::vector<std::size_t> unique_prompt_representatives() const;

  friend bool operator==(const Corpus& a, const Corpus& b) {
    return a.split_ == b.split_ && a.records_ == b.records_;
  }

 private:
  void build_lookup();

  Split split_ = Split::Train;
  std::vector<PromptRecord> records_;
  std::uint64_t source_hash_ = 0;
  std::unordered_map<std::string, std::size_t> by_id_;
  // prompt text -> ordinals in ingestion order
  std::unordered_map<std::string, std::vector<std::size_t>> by_prompt_;
  std::vector<std::size_t> first_occurrence_;  // ordinal of each text's first row
};

struct IngestResult {
  Corpus corpus;
  std::vector<MalformedRow> rejected;
  std::size_t non_blank_lines = 0;
};

/// Parses one line-JSON row. Returns the reason on failure.
std::optional<std::string> parse_row(std::string_view line, std::string& prompt,
                                     std::string& response, MetricScores& scores);

/// Reads a line-delimited JSON split file. Invalid rows are logged and
/// reported in `rejected`; the row index (and therefore the id) of each
/// record is its position among non-blank lines.
/// Throws FileNotFound, EmptyCorpus.
IngestResult ingest(const std::filesystem::path& source_path, Split split);
IngestResult ingest_text(std::string_view contents, Split split, std::uint64_t source_hash = 0);

/// Throws UnknownId.
const PromptRecord& get(const Corpus& corpus, std::string_view id);

/// Scores of the best-averaged record whose prompt equals `prompt_text`.
/// Throws NoMatch.
MetricScores resolve_scores(const Corpus& corpus, std::string_view prompt_text);

inline constexpr int kCorpusCacheVersion = 1;

/// Line-JSON cache: a header line followed by one line per record.
void save_corpus_cache(const Corpus& corpus, const std::filesystem::path& path);
/// Throws CacheError on a version mismatch, a malformed file, or when
/// `expected_source_hash` is given and differs from the stored hash.
Corpus load_corpus_cache(const std::filesystem::path& path,
                         std::optional<std::uint64_t> expected_source_hash = std::nullopt);

/// Cache location keyed by source hash: "<dir>/<split>-<hash>.corpus.jsonl".
std::filesystem::path corpus_cache_path(const std::filesystem::path& cache_dir,
                                        std::uint64_t source_hash, Split split);

/// Loads from `cache_dir` when a valid cache for the file's current bytes
/// exists, otherwise ingests and writes the cache.
Corpus load_or_ingest(const std::filesystem::path& source_path, Split split,
                      const std::optional<std::filesystem::path>& cache_dir);

}  // namespace crpo
