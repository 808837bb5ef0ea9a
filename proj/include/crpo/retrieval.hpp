#pragma once

#include "crpo/corpus.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace crpo {

/// Exemplar coverage needs at least one retrieved prompt per metric.
inline constexpr std::size_t kMinTopK = kMetricCount;
inline constexpr std::size_t kDefaultTopK = 10;

/// Lower-cased maximal runs of Unicode alphanumerics; anything else
/// separates. No stemming, no stopwords.
std::vector<std::string> tokenize(std::string_view text);

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;

  friend bool operator==(const Bm25Params&, const Bm25Params&) = default;
};

struct Posting {
  std::uint32_t doc = 0;
  std::uint32_t tf = 0;

  friend bool operator==(const Posting&, const Posting&) = default;
};

/// Inverted index over the distinct prompt texts of a corpus. Each document
/// is represented by the record `Corpus::representative` picks for its text.
struct Bm25Index {
  Bm25Params params;
  std::uint64_t corpus_hash = 0;
  std::unordered_map<std::string, std::vector<Posting>> postings;
  std::vector<std::uint32_t> doc_lengths;
  double avg_doc_length = 0.0;
  std::vector<std::string> doc_ids;  // record id per doc ordinal

  std::size_t doc_count() const { return doc_lengths.size(); }
  /// Smoothed Robertson IDF: ln((N - df + 0.5) / (df + 0.5) + 1).
  double idf(std::size_t df) const;

  friend bool operator==(const Bm25Index&, const Bm25Index&) = default;
};

/// Single term contribution of Okapi BM25.
double bm25_term_score(double idf, double tf, double doc_length, double avg_doc_length,
                       const Bm25Params& params);

/// Throws EmptyCorpus.
Bm25Index build_index(const Corpus& corpus, const Bm25Params& params = {});

struct RetrievedEntry {
  std::string record_id;
  std::uint32_t doc = 0;
  double score = 0.0;
  std::size_t rank = 0;  // 1-based

  friend bool operator==(const RetrievedEntry&, const RetrievedEntry&) = default;
};

struct RetrievedSet {
  std::string query;
  std::size_t k = kDefaultTopK;
  std::vector<RetrievedEntry> entries;
  /// True when fewer than k (but at least kMinTopK) documents matched.
  bool shortfall = false;
};

/// Throws KTooSmall when k < kMinTopK.
void require_top_k(std::size_t k);

/// Top-k documents by BM25 score, ties broken by ascending doc ordinal.
/// Throws KTooSmall, EmptyQuery, InsufficientCandidates.
RetrievedSet retrieve(const Bm25Index& index, std::string_view query, std::size_t k);

inline constexpr std::uint32_t kIndexCacheVersion = 1;

/// Binary cache: magic, version, corpus hash, params, then the index body.
void save_index(const Bm25Index& index, const std::filesystem::path& path);
/// Throws CacheError on a bad magic/version or when the stored corpus hash or
/// params differ from the expected ones.
Bm25Index load_index(const std::filesystem::path& path, std::uint64_t expected_corpus_hash,
                     const Bm25Params& expected_params);

std::filesystem::path index_cache_path(const std::filesystem::path& cache_dir,
                                       std::uint64_t corpus_hash, const Bm25Params& params);

Bm25Index load_or_build_index(const Corpus& corpus, const Bm25Params& params,
                              const std::optional<std::filesystem::path>& cache_dir);

}  // namespace crpo
