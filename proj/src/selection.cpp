#include "crpo/selection.hpp"

#include "crpo/error.hpp"

#include <algorithm>

namespace crpo {

double avg_score(const MetricScores& scores) {
  return static_cast<double>(scores.sum()) / static_cast<double>(kMetricCount);
}

bool quality_before(const ScoredCandidate& a, const ScoredCandidate& b) {
  const int sa = a.scores.sum();
  const int sb = b.scores.sum();
  if (sa != sb) return sa > sb;
  if (a.retrieval_rank != b.retrieval_rank) return a.retrieval_rank < b.retrieval_rank;
  return a.record_id < b.record_id;
}

std::vector<ScoredCandidate> score_candidates(const RetrievedSet& retrieved, const Corpus& corpus) {
  std::vector<ScoredCandidate> out;
  out.reserve(retrieved.entries.size());
  for (const auto& e : retrieved.entries) {
    const auto& rec = corpus.get(e.record_id);
    out.push_back({rec.id, rec.prompt_text, rec.scores, e.rank, e.score});
  }
  return out;
}

TierPartition partition_tiers(std::vector<ScoredCandidate> candidates) {
  const std::size_t n = candidates.size();
  if (n < 2) {
    throw TooFewCandidates("tier partition needs at least 2 candidates, got " + std::to_string(n));
  }
  std::sort(candidates.begin(), candidates.end(), quality_before);
  const std::size_t outer = (n + 2) / 3;
  TierPartition tiers;
  const auto first = candidates.begin();
  tiers.high.assign(first, first + static_cast<std::ptrdiff_t>(outer));
  tiers.medium.assign(first + static_cast<std::ptrdiff_t>(outer),
                      first + static_cast<std::ptrdiff_t>(n - outer));
  tiers.low.assign(first + static_cast<std::ptrdiff_t>(n - outer), candidates.end());
  return tiers;
}

MetricBest best_per_metric(const std::vector<ScoredCandidate>& candidates) {
  if (candidates.empty()) throw EmptySet("no candidates to select from");
  MetricBest best;
  for (Metric m : kAllMetrics) {
    const ScoredCandidate* winner = &candidates.front();
    for (const auto& c : candidates) {
      if (c.scores[m] > winner->scores[m] ||
          (c.scores[m] == winner->scores[m] && quality_before(c, *winner))) {
        winner = &c;
      }
    }
    best[m] = *winner;
  }
  return best;
}

}  // namespace crpo
