#pragma once

#include "crpo/corpus.hpp"
#include "crpo/selection.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace crpo::testing {

inline std::filesystem::path fixture_path(const std::string& name) {
  return std::filesystem::path(CRPO_FIXTURE_DIR) / name;
}

inline std::filesystem::path golden_dir() { return std::filesystem::path(CRPO_GOLDEN_DIR); }

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("crpo-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline MetricScores scores_of(int h, int c, int co, int cx, int v) {
  MetricScores s;
  s.values = {h, c, co, cx, v};
  return s;
}

inline PromptRecord make_record(std::size_t row, std::string prompt, MetricScores scores,
                                Split split = Split::Train) {
  PromptRecord r;
  r.split = split;
  r.row_index = row;
  r.id = std::string(split_name(split)) + ":" + std::to_string(row);
  r.prompt_text = std::move(prompt);
  r.response_text = "response " + std::to_string(row);
  r.scores = scores;
  return r;
}

/// One record per text, scores drawn from `rng`.
inline Corpus make_corpus(const std::vector<std::string>& texts, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> score(0, 4);
  std::vector<PromptRecord> records;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    records.push_back(make_record(i, texts[i],
                                  scores_of(score(rng), score(rng), score(rng), score(rng), score(rng))));
  }
  return Corpus(Split::Train, std::move(records));
}

inline ScoredCandidate candidate(std::string id, MetricScores scores, std::size_t rank) {
  ScoredCandidate c;
  c.record_id = std::move(id);
  c.prompt_text = "prompt " + c.record_id;
  c.scores = scores;
  c.retrieval_rank = rank;
  c.bm25_score = 100.0 - static_cast<double>(rank);
  return c;
}

/// Random candidate set with dense ties: scores in [0, max_score], ranks a
/// permutation of 1..n, ids in random lexicographic order.
inline std::vector<ScoredCandidate> random_candidates(std::mt19937_64& rng, std::size_t n, int max_score = 2) {
  std::uniform_int_distribution<int> score(0, max_score);
  std::vector<std::size_t> ranks(n);
  for (std::size_t i = 0; i < n; ++i) ranks[i] = i + 1;
  std::shuffle(ranks.begin(), ranks.end(), rng);
  std::uniform_int_distribution<int> id_digit(0, 9);
  std::vector<ScoredCandidate> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string id = "train:" + std::to_string(id_digit(rng)) + std::to_string(i);
    out.push_back(candidate(id, scores_of(score(rng), score(rng), score(rng), score(rng), score(rng)), ranks[i]));
  }
  return out;
}

// ---- brute-force oracles ----

/// True when `a` is strictly better than `b`: larger score total, then
/// smaller retrieval rank, then smaller id.
inline bool oracle_better(const ScoredCandidate& a, const ScoredCandidate& b) {
  int sa = 0, sb = 0;
  for (int i = 0; i < 5; ++i) {
    sa += a.scores.values[i];
    sb += b.scores.values[i];
  }
  if (sa != sb) return sa > sb;
  if (a.retrieval_rank != b.retrieval_rank) return a.retrieval_rank < b.retrieval_rank;
  return a.record_id < b.record_id;
}

/// Quality position of each candidate, counted as the number that beat it.
inline std::vector<std::size_t> oracle_positions(const std::vector<ScoredCandidate>& cs) {
  std::vector<std::size_t> pos(cs.size(), 0);
  for (std::size_t i = 0; i < cs.size(); ++i) {
    for (std::size_t j = 0; j < cs.size(); ++j) {
      if (i != j && oracle_better(cs[j], cs[i])) ++pos[i];
    }
  }
  return pos;
}

/// Index of the per-metric winner.
inline std::size_t oracle_argmax(const std::vector<ScoredCandidate>& cs, std::size_t metric) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < cs.size(); ++i) {
    const int v = cs[i].scores.values[metric];
    const int bv = cs[best].scores.values[metric];
    if (v > bv || (v == bv && oracle_better(cs[i], cs[best]))) best = i;
  }
  return best;
}

struct OracleHit {
  std::size_t doc;
  double score;
};

/// Okapi BM25 over pre-tokenized documents with every matching document
/// returned, best first, ties by document order.
inline std::vector<OracleHit> oracle_bm25(const std::vector<std::vector<std::string>>& docs,
                                          const std::vector<std::string>& query, double k1, double b) {
  const double n = static_cast<double>(docs.size());
  double total = 0.0;
  for (const auto& d : docs) total += static_cast<double>(d.size());
  const double avgdl = total / n;
  std::vector<double> score(docs.size(), 0.0);
  std::vector<bool> hit(docs.size(), false);
  for (const auto& term : query) {
    double df = 0.0;
    for (const auto& d : docs) df += std::count(d.begin(), d.end(), term) > 0 ? 1.0 : 0.0;
    if (df == 0.0) continue;
    const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    for (std::size_t i = 0; i < docs.size(); ++i) {
      const double tf = static_cast<double>(std::count(docs[i].begin(), docs[i].end(), term));
      if (tf == 0.0) continue;
      const double dl = static_cast<double>(docs[i].size());
      const double norm = k1 * (1.0 - b + b * dl / avgdl);
      score[i] += idf * (tf * (k1 + 1.0)) / (tf + norm);
      hit[i] = true;
    }
  }
  std::vector<OracleHit> out;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (hit[i]) out.push_back({i, score[i]});
  }
  std::stable_sort(out.begin(), out.end(), [](const OracleHit& x, const OracleHit& y) { return x.score > y.score; });
  return out;
}

/// Random corpus of distinct space-joined texts over a small vocabulary.
inline std::vector<std::vector<std::string>> random_documents(std::mt19937_64& rng, std::size_t max_docs,
                                                              std::size_t max_terms,
                                                              const std::vector<std::string>& vocab) {
  std::uniform_int_distribution<std::size_t> doc_count(1, max_docs);
  std::uniform_int_distribution<std::size_t> term_count(1, max_terms);
  std::uniform_int_distribution<std::size_t> word(0, vocab.size() - 1);
  const std::size_t n = doc_count(rng);
  std::vector<std::vector<std::string>> docs;
  std::vector<std::string> seen;
  std::size_t guard = 0;
  while (docs.size() < n && guard++ < n * 50) {
    std::vector<std::string> d;
    const std::size_t len = term_count(rng);
    for (std::size_t t = 0; t < len; ++t) d.push_back(vocab[word(rng)]);
    std::string text;
    for (const auto& w : d) text += (text.empty() ? "" : " ") + w;
    if (std::find(seen.begin(), seen.end(), text) != seen.end()) continue;
    seen.push_back(text);
    docs.push_back(std::move(d));
  }
  return docs;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string text;
  for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
  return text;
}

}  // namespace crpo::testing
