#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>

namespace crpo {

/// The five annotation dimensions, in canonical column order.
enum class Metric : std::size_t { Helpfulness, Correctness, Coherence, Complexity, Verbosity };

inline constexpr std::size_t kMetricCount = 5;

inline constexpr std::array<Metric, kMetricCount> kAllMetrics = {
    Metric::Helpfulness, Metric::Correctness, Metric::Coherence, Metric::Complexity,
    Metric::Verbosity};

inline constexpr int kMinScore = 0;
inline constexpr int kMaxScore = 4;

constexpr std::string_view metric_name(Metric m) {
  constexpr std::array<std::string_view, kMetricCount> kNames = {
      "helpfulness", "correctness", "coherence", "complexity", "verbosity"};
  return kNames[static_cast<std::size_t>(m)];
}

constexpr std::optional<Metric> metric_from_name(std::string_view name) {
  for (Metric m : kAllMetrics) {
    if (metric_name(m) == name) return m;
  }
  return std::nullopt;
}

/// Integer annotation scores, each in [0, 4].
struct MetricScores {
  std::array<int, kMetricCount> values{};

  int& operator[](Metric m) { return values[static_cast<std::size_t>(m)]; }
  int operator[](Metric m) const { return values[static_cast<std::size_t>(m)]; }

  int sum() const {
    int s = 0;
    for (int v : values) s += v;
    return s;
  }

  bool valid() const {
    for (int v : values) {
      if (v < kMinScore || v > kMaxScore) return false;
    }
    return true;
  }

  friend bool operator==(const MetricScores&, const MetricScores&) = default;
};

}  // namespace crpo
