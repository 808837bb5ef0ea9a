#pragma once

#include "crpo/corpus.hpp"
#include "crpo/metrics.hpp"
#include "crpo/retrieval.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace crpo {

/// Arithmetic mean of the five scores.
double avg_score(const MetricScores& scores);

/// A retrieved exemplar with its annotation.
struct ScoredCandidate {
  std::string record_id;
  std::string prompt_text;
  MetricScores scores;
  std::size_t retrieval_rank = 0;  // 1-based
  double bm25_score = 0.0;

  /// Exact average; compare on `scores.sum()` to avoid rounding.
  double avg() const { return avg_score(scores); }

  friend bool operator==(const ScoredCandidate&, const ScoredCandidate&) = default;
};

/// Total quality order: higher average first, then better retrieval rank,
/// then lexicographically smaller record id.
bool quality_before(const ScoredCandidate& a, const ScoredCandidate& b);

/// Joins a retrieval result with the corpus annotations. Throws UnknownId.
std::vector<ScoredCandidate> score_candidates(const RetrievedSet& retrieved, const Corpus& corpus);

struct TierPartition {
  std::vector<ScoredCandidate> high;
  std::vector<ScoredCandidate> medium;
  std::vector<ScoredCandidate> low;
};

/// Rank tertiles under `quality_before`: the first ceil(n/3) are high, the
/// last ceil(n/3) are low, the rest medium. n == 2 yields one high and one
/// low. Throws TooFewCandidates when n < 2.
TierPartition partition_tiers(std::vector<ScoredCandidate> candidates);

/// Per-metric winner. A candidate may win several metrics.
struct MetricBest {
  std::array<std::optional<ScoredCandidate>, kMetricCount> winners;

  const std::optional<ScoredCandidate>& operator[](Metric m) const {
    return winners[static_cast<std::size_t>(m)];
  }
  std::optional<ScoredCandidate>& operator[](Metric m) { return winners[static_cast<std::size_t>(m)]; }
};

/// Argmax per metric; ties go to the higher average, then the better
/// retrieval rank, then the smaller record id. Throws EmptySet.
MetricBest best_per_metric(const std::vector<ScoredCandidate>& candidates);

}  // namespace crpo
