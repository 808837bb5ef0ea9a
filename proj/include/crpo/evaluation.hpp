#pragma once

#include "crpo/error.hpp"
#include "crpo/llm_gateway.hpp"
#include "crpo/metrics.hpp"

#include <array>
#include <chrono>
#include <string>
#include <string_view>

namespace crpo {

/// Five raw scores on the 0-4 scale plus their normalized mean.
struct EvalVector {
  std::array<double, kMetricCount> raw{};
  double normalized = 0.0;  // sum(raw) / 20

  double operator[](Metric m) const { return raw[static_cast<std::size_t>(m)]; }
  /// raw / 4, the per-column value of the report table.
  double normalized_metric(Metric m) const { return (*this)[m] / 4.0; }

  friend bool operator==(const EvalVector&, const EvalVector&) = default;
};

/// Throws OutOfRange(metric, value) when a score leaves [0, 4].
EvalVector normalize(const std::array<double, kMetricCount>& raw);

/// Maps a value from [lo, hi] onto [0, 4].
double rescale_to_score_range(double value, double lo, double hi);

/// Scores a (context, candidate) pair on the five dimensions.
class EvaluatorBackend {
 public:
  virtual ~EvaluatorBackend() = default;
  /// Raw scores already mapped to [0, 4].
  virtual std::array<double, kMetricCount> score(std::string_view context,
                                                 std::string_view candidate) = 0;
  virtual BackendKind kind() const = 0;
};

/// Content-hash scores: a pure function of (context, candidate).
class MockEvaluator final : public EvaluatorBackend {
 public:
  std::array<double, kMetricCount> score(std::string_view context,
                                         std::string_view candidate) override;
  BackendKind kind() const override { return BackendKind::Mock; }
};

struct EvaluatorHealth {
  std::string status;
  std::string model_id;
};

/// Client for the reward-model sidecar: POST /score, GET /health.
class HttpEvaluator final : public EvaluatorBackend {
 public:
  /// `url` is the service origin, e.g. http://127.0.0.1:8088.
  explicit HttpEvaluator(std::string url, RetryPolicy retry = {},
                         std::chrono::seconds read_timeout = std::chrono::seconds{120},
                         Sleeper sleeper = {});

  /// Throws EvaluatorTransport or EvaluatorSchema.
  std::array<double, kMetricCount> score(std::string_view context,
                                         std::string_view candidate) override;
  EvaluatorHealth health();
  BackendKind kind() const override { return BackendKind::Remote; }

 private:
  std::string origin_;
  RetryPolicy retry_;
  std::chrono::seconds read_timeout_;
  Sleeper sleeper_;
};

/// Parses a /score reply body and rescales it from its declared native
/// range. Throws EvaluatorSchema.
std::array<double, kMetricCount> parse_score_response(std::string_view body);

/// Throws EvaluatorTransport / EvaluatorSchema from the backend and
/// OutOfRange on bad values.
EvalVector evaluate(std::string_view context, std::string_view candidate, EvaluatorBackend& evaluator);

enum class EvalMode {
  /// Generate a response for each prompt and score (prompt, response).
  Response,
  /// Score (query, prompt) directly, no generation.
  PromptPair,
};

std::string_view eval_mode_name(EvalMode mode);
EvalMode eval_mode_from_name(std::string_view name);

struct PairComparison {
  EvalVector original_eval;
  EvalVector optimized_eval;
  std::array<double, kMetricCount> delta_per_metric{};
  double delta_overall = 0.0;
  std::string original_response;
  std::string optimized_response;
};

enum class PairSide { Original, Optimized };

std::string_view pair_side_name(PairSide side);

/// Wraps a failure from one side of `compare_pair`.
class PairSideError : public Error {
 public:
  PairSideError(PairSide side, const Error& cause);
  PairSide side() const { return side_; }
  const std::string& cause_kind() const { return cause_kind_; }

 private:
  PairSide side_;
  std::string cause_kind_;
};

/// Evaluates the original and optimized prompt under identical conditions.
/// In Response mode both generations are issued concurrently. Throws
/// PairSideError.
PairComparison compare_pair(std::string_view query, std::string_view original_prompt,
                            std::string_view optimized_prompt, LlmGateway& generator,
                            EvaluatorBackend& evaluator, EvalMode mode = EvalMode::Response,
                            std::string_view request_tag = "");

}  // namespace crpo
