#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>

namespace crpo {

enum class BackendKind { Remote, Mock };

std::string_view backend_kind_name(BackendKind kind);

struct GenerationRequest {
  std::string rendered_text;
  std::string model_name;
  double temperature = 0.0;
  std::size_t max_tokens = 1024;
  std::string request_tag;
};

struct TokenUsage {
  std::size_t prompt_tokens = 0;
  std::size_t completion_tokens = 0;

  friend bool operator==(const TokenUsage&, const TokenUsage&) = default;
};

struct GenerationResult {
  std::string raw_text;
  std::optional<std::string> extracted_prompt;
  TokenUsage usage;
  std::chrono::milliseconds latency{0};
  BackendKind backend = BackendKind::Mock;
  std::string request_tag;
  std::size_t attempts = 1;
};

/// Text strictly between the one begin/end sentinel pair, trimmed. Absent
/// when either sentinel is missing, repeated, or out of order.
std::optional<std::string> extract_optimized(std::string_view raw_text);

/// What a backend returns for one attempt.
struct Completion {
  std::string text;
  TokenUsage usage;
};

/// One chat-completion provider. Implementations throw TransportError for
/// transient faults (retried by the gateway) and AuthError, ContextOverflow
/// or ContentError for everything else.
class LlmBackend {
 public:
  virtual ~LlmBackend() = default;
  virtual Completion complete(const GenerationRequest& request) = 0;
  virtual BackendKind kind() const = 0;
};

/// Deterministic offline backend. Output is a pure function of
/// (rendered_text, model_name) and always carries both sentinels.
class MockLlmBackend final : public LlmBackend {
 public:
  Completion complete(const GenerationRequest& request) override;
  BackendKind kind() const override { return BackendKind::Mock; }
};

struct HttpEndpointConfig {
  /// Full endpoint URL, e.g. https://api.openai.com/v1/chat/completions.
  /// A bare scheme://host[:port] gets /v1/chat/completions appended.
  std::string url;
  std::string api_key;
  std::chrono::seconds connect_timeout{10};
  std::chrono::seconds read_timeout{300};
};

/// OpenAI-compatible chat completions over HTTP(S): one user message,
/// bearer auth, reply read from choices[0].message.content.
class OpenAiChatBackend final : public LlmBackend {
 public:
  explicit OpenAiChatBackend(HttpEndpointConfig config);
  Completion complete(const GenerationRequest& request) override;
  BackendKind kind() const override { return BackendKind::Remote; }

 private:
  HttpEndpointConfig config_;
  std::string origin_;
  std::string path_;
};

/// Splits "scheme://host[:port]/path" into origin and path. Throws ConfigError.
std::pair<std::string, std::string> split_url(std::string_view url, std::string_view default_path);

struct RetryPolicy {
  std::size_t max_attempts = 4;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::milliseconds max_backoff{8000};
};

/// Backoff before attempt `attempt` (2-based): initial * 2^(attempt-2), capped.
std::chrono::milliseconds backoff_delay(const RetryPolicy& policy, std::size_t attempt);

using Sleeper = std::function<void(std::chrono::milliseconds)>;

struct GatewayConfig {
  std::string model_name = "mock";
  std::size_t max_tokens = 1024;
  double temperature = 0.0;
  std::size_t max_in_flight = 4;
  RetryPolicy retry;
};

/// Uniform generation entry point. Safe for concurrent callers; at most
/// `max_in_flight` backend calls run at once.
class LlmGateway {
 public:
  LlmGateway(std::shared_ptr<LlmBackend> backend, GatewayConfig config, Sleeper sleeper = {});

  /// Throws TransportError once the retry budget is spent, AuthError,
  /// ContextOverflow or ContentError immediately.
  GenerationResult generate(const GenerationRequest& request);

  /// Request with the gateway's model, temperature and token limit.
  GenerationRequest make_request(std::string rendered_text, std::string tag) const;

  const GatewayConfig& config() const { return config_; }
  BackendKind backend_kind() const { return backend_->kind(); }

 private:
  std::shared_ptr<LlmBackend> backend_;
  GatewayConfig config_;
  Sleeper sleeper_;
  std::counting_semaphore<> in_flight_;
};

}  // namespace crpo
