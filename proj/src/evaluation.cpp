#include "crpo/evaluation.hpp"

#include "crpo/error.hpp"
#include "crpo/util.hpp"

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <future>
#include <thread>

namespace crpo {

using nlohmann::json;

EvalVector normalize(const std::array<double, kMetricCount>& raw) {
  EvalVector v;
  double sum = 0.0;
  for (Metric m : kAllMetrics) {
    const double s = raw[static_cast<std::size_t>(m)];
    if (!(s >= kMinScore && s <= kMaxScore)) {
      throw OutOfRange(std::string(metric_name(m)) + " score " + std::to_string(s) +
                       " is outside [0, 4]");
    }
    v.raw[static_cast<std::size_t>(m)] = s;
    sum += s;
  }
  v.normalized = sum / (4.0 * kMetricCount);
  return v;
}

double rescale_to_score_range(double value, double lo, double hi) {
  return (value - lo) / (hi - lo) * kMaxScore;
}

std::array<double, kMetricCount> MockEvaluator::score(std::string_view context,
                                                      std::string_view candidate) {
  std::array<double, kMetricCount> out{};
  const std::uint64_t base = fnv1a64(candidate, fnv1a64(std::string(context) + "\x1f"));
  for (Metric m : kAllMetrics) {
    const std::uint64_t h = fnv1a64(metric_name(m), base);
    out[static_cast<std::size_t>(m)] = static_cast<double>(h % 4001) / 1000.0;
  }
  return out;
}

std::array<double, kMetricCount> parse_score_response(std::string_view body) {
  json reply = json::parse(body.begin(), body.end(), nullptr, false);
  if (reply.is_discarded() || !reply.is_object()) throw EvaluatorSchema("score reply is not a JSON object");
  double lo = 0.0;
  double hi = 4.0;
  if (auto range = reply.find("native_range"); range != reply.end()) {
    if (!range->is_array() || range->size() != 2 || !(*range)[0].is_number() ||
        !(*range)[1].is_number()) {
      throw EvaluatorSchema("native_range must be [lo, hi]");
    }
    lo = (*range)[0].get<double>();
    hi = (*range)[1].get<double>();
    if (!(hi > lo)) throw EvaluatorSchema("native_range must satisfy lo < hi");
  }
  constexpr double kSlack = 1e-9;
  std::array<double, kMetricCount> out{};
  for (Metric m : kAllMetrics) {
    const auto key = std::string(metric_name(m));
    auto it = reply.find(key);
    if (it == reply.end() || !it->is_number()) throw EvaluatorSchema("score reply lacks numeric '" + key + "'");
    double value = it->get<double>();
    if (!(value >= lo - kSlack && value <= hi + kSlack)) {
      throw EvaluatorSchema(key + "=" + std::to_string(value) + " is outside the declared native range");
    }
    value = std::clamp(value, lo, hi);
    out[static_cast<std::size_t>(m)] = std::clamp(rescale_to_score_range(value, lo, hi), 0.0, 4.0);
  }
  return out;
}

HttpEvaluator::HttpEvaluator(std::string url, RetryPolicy retry, std::chrono::seconds read_timeout,
                             Sleeper sleeper)
    : retry_(retry), read_timeout_(read_timeout), sleeper_(std::move(sleeper)) {
  origin_ = split_url(url, "/").first;
  if (retry_.max_attempts == 0) retry_.max_attempts = 1;
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::array<double, kMetricCount> HttpEvaluator::score(std::string_view context,
                                                      std::string_view candidate) {
  const std::string body = json{{"context", context}, {"candidate", candidate}}.dump();
  for (std::size_t attempt = 1;; ++attempt) {
    if (attempt > 1) sleeper_(backoff_delay(retry_, attempt));
    httplib::Client client(origin_);
    client.set_connection_timeout(std::chrono::seconds{10});
    client.set_read_timeout(read_timeout_);
    auto res = client.Post("/score", body, "application/json");
    std::string failure;
    if (!res) {
      failure = "evaluator unreachable: " + httplib::to_string(res.error());
    } else if (res->status == 429 || res->status >= 500) {
      failure = "evaluator HTTP " + std::to_string(res->status);
    } else if (res->status < 200 || res->status >= 300) {
      throw EvaluatorTransport("evaluator HTTP " + std::to_string(res->status) + ": " +
                               res->body.substr(0, 300));
    } else {
      return parse_score_response(res->body);
    }
    if (attempt >= retry_.max_attempts) {
      throw EvaluatorTransport(failure + " (gave up after " + std::to_string(attempt) + " attempts)");
    }
    spdlog::warn("score attempt {} failed: {}", attempt, failure);
  }
}

EvaluatorHealth HttpEvaluator::health() {
  httplib::Client client(origin_);
  client.set_connection_timeout(std::chrono::seconds{10});
  auto res = client.Get("/health");
  if (!res) throw EvaluatorTransport("evaluator unreachable: " + httplib::to_string(res.error()));
  json reply = json::parse(res->body, nullptr, false);
  if (reply.is_discarded() || !reply.is_object()) {
    throw EvaluatorSchema("health reply is not a JSON object (HTTP " + std::to_string(res->status) + ")");
  }
  EvaluatorHealth h;
  h.status = reply.value("status", "");
  h.model_id = reply.value("model_id", "");
  if (h.status.empty()) throw EvaluatorSchema("health reply lacks 'status'");
  return h;
}

EvalVector evaluate(std::string_view context, std::string_view candidate, EvaluatorBackend& evaluator) {
  return normalize(evaluator.score(context, candidate));
}

std::string_view eval_mode_name(EvalMode mode) {
  return mode == EvalMode::Response ? "response" : "prompt_pair";
}

EvalMode eval_mode_from_name(std::string_view name) {
  if (name == "response") return EvalMode::Response;
  if (name == "prompt_pair") return EvalMode::PromptPair;
  throw ConfigError("unknown eval mode '" + std::string(name) + "' (expected response or prompt_pair)");
}

std::string_view pair_side_name(PairSide side) {
  return side == PairSide::Original ? "original" : "optimized";
}

PairSideError::PairSideError(PairSide side, const Error& cause)
    : Error("PairSideError", std::string(pair_side_name(side)) + " side: " + cause.what()),
      side_(side),
      cause_kind_(cause.kind()) {}

namespace {

struct SideResult {
  EvalVector eval;
  std::string response;
};

SideResult run_side(PairSide side, std::string_view query, std::string_view prompt,
                    LlmGateway& generator, EvaluatorBackend& evaluator, EvalMode mode,
                    const std::string& tag) {
  try {
    SideResult r;
    if (mode == EvalMode::PromptPair) {
      r.eval = evaluate(query, prompt, evaluator);
      return r;
    }
    auto gen = generator.generate(generator.make_request(std::string(prompt), tag));
    r.response = std::move(gen.raw_text);
    r.eval = evaluate(prompt, r.response, evaluator);
    return r;
  } catch (const Error& e) {
    throw PairSideError(side, e);
  }
}

}  // namespace

PairComparison compare_pair(std::string_view query, std::string_view original_prompt,
                            std::string_view optimized_prompt, LlmGateway& generator,
                            EvaluatorBackend& evaluator, EvalMode mode, std::string_view request_tag) {
  const std::string tag(request_tag);
  auto original = std::async(std::launch::async, [&] {
    return run_side(PairSide::Original, query, original_prompt, generator, evaluator, mode,
                    tag + "/original");
  });
  SideResult optimized;
  std::exception_ptr optimized_error;
  try {
    optimized = run_side(PairSide::Optimized, query, optimized_prompt, generator, evaluator, mode,
                         tag + "/optimized");
  } catch (...) {
    optimized_error = std::current_exception();
  }
  SideResult orig = original.get();
  if (optimized_error) std::rethrow_exception(optimized_error);

  PairComparison cmp;
  cmp.original_eval = orig.eval;
  cmp.optimized_eval = optimized.eval;
  cmp.original_response = std::move(orig.response);
  cmp.optimized_response = std::move(optimized.response);
  for (std::size_t i = 0; i < kMetricCount; ++i) {
    cmp.delta_per_metric[i] = cmp.optimized_eval.raw[i] - cmp.original_eval.raw[i];
  }
  cmp.delta_overall = cmp.optimized_eval.normalized - cmp.original_eval.normalized;
  return cmp;
}

}  // namespace crpo
