#include "crpo/llm_gateway.hpp"

#include "crpo/error.hpp"
#include "crpo/prompting.hpp"
#include "crpo/util.hpp"

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <sstream>
#include <thread>

namespace crpo {

using nlohmann::json;

std::string_view backend_kind_name(BackendKind kind) {
  return kind == BackendKind::Remote ? "remote" : "mock";
}

std::optional<std::string> extract_optimized(std::string_view raw_text) {
  const auto begin = raw_text.find(kSentinelBegin);
  if (begin == std::string_view::npos) return std::nullopt;
  if (raw_text.find(kSentinelBegin, begin + kSentinelBegin.size()) != std::string_view::npos) {
    return std::nullopt;
  }
  const auto end = raw_text.find(kSentinelEnd);
  if (end == std::string_view::npos || end < begin + kSentinelBegin.size()) return std::nullopt;
  if (raw_text.find(kSentinelEnd, end + kSentinelEnd.size()) != std::string_view::npos) {
    return std::nullopt;
  }
  const auto start = begin + kSentinelBegin.size();
  return trim(raw_text.substr(start, end - start));
}

namespace {

std::size_t word_count(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : text) {
    const bool space = c == ' ' || c == '\n' || c == '\t' || c == '\r';
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

std::string collapse_whitespace(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += c;
  }
  return out;
}

// The query section of a rendered meta-prompt, or the whole text.
std::string_view focus_text(std::string_view text) {
  constexpr std::string_view kMarker = "Original query:\n";
  const auto at = text.rfind(kMarker);
  if (at == std::string_view::npos) return text;
  auto rest = text.substr(at + kMarker.size());
  const auto blank = rest.find("\n\n");
  return blank == std::string_view::npos ? rest : rest.substr(0, blank);
}

}  // namespace

Completion MockLlmBackend::complete(const GenerationRequest& request) {
  const std::uint64_t h = fnv1a64(request.model_name + "\x1f" + request.rendered_text);
  const std::string hex = to_hex(h);
  const std::string excerpt(utf8_prefix(
      collapse_whitespace(neutralize_sentinels(focus_text(request.rendered_text))), 240));
  std::ostringstream out;
  out << "[mock " << request.model_name << " " << hex << "] Read "
      << utf8_length(request.rendered_text) << " characters of instructions.\n"
      << kSentinelBegin << "\n"
      << "Answer the following request thoroughly, accurately and clearly (variant "
      << hex.substr(0, 8) << "): " << excerpt << "\n"
      << kSentinelEnd << "\n";
  Completion c;
  c.text = out.str();
  c.usage.prompt_tokens = word_count(request.rendered_text);
  c.usage.completion_tokens = word_count(c.text);
  return c;
}

std::pair<std::string, std::string> split_url(std::string_view url, std::string_view default_path) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) {
    throw ConfigError("endpoint URL needs a scheme: '" + std::string(url) + "'");
  }
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") {
    throw ConfigError("unsupported URL scheme '" + std::string(scheme) + "'");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string_view::npos) {
    return {std::string(url), std::string(default_path)};
  }
  std::string path(url.substr(path_start));
  if (path == "/") path = std::string(default_path);
  return {std::string(url.substr(0, path_start)), path};
}

OpenAiChatBackend::OpenAiChatBackend(HttpEndpointConfig config) : config_(std::move(config)) {
  std::tie(origin_, path_) = split_url(config_.url, "/v1/chat/completions");
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (origin_.rfind("https://", 0) == 0) {
    throw ConfigError("this build has no TLS support; cannot reach " + origin_);
  }
#endif
}

Completion OpenAiChatBackend::complete(const GenerationRequest& request) {
  httplib::Client client(origin_);
  client.set_connection_timeout(config_.connect_timeout);
  client.set_read_timeout(config_.read_timeout);
  if (!config_.api_key.empty()) client.set_bearer_token_auth(config_.api_key);

  json body = {{"model", request.model_name},
               {"messages", json::array({{{"role", "user"}, {"content", request.rendered_text}}})},
               {"temperature", request.temperature},
               {"max_tokens", request.max_tokens}};
  auto res = client.Post(path_, body.dump(), "application/json");
  if (!res) {
    throw TransportError("request to " + origin_ + path_ + " failed: " + httplib::to_string(res.error()));
  }
  const int status = res->status;
  const std::string snippet = res->body.substr(0, 300);
  if (status == 401 || status == 403) {
    throw AuthError("endpoint rejected credentials (HTTP " + std::to_string(status) + ")");
  }
  if (status == 400 || status == 413 || status == 422) {
    const bool overflow = res->body.find("context_length") != std::string::npos ||
                          res->body.find("maximum context") != std::string::npos ||
                          res->body.find("context window") != std::string::npos;
    if (overflow || status == 413) throw ContextOverflow("prompt exceeds model context: " + snippet);
  }
  if (status == 408 || status == 409 || status == 425 || status == 429 || status >= 500) {
    throw TransportError("HTTP " + std::to_string(status) + ": " + snippet);
  }
  if (status < 200 || status >= 300) throw ContentError("HTTP " + std::to_string(status) + ": " + snippet);

  json reply = json::parse(res->body, nullptr, false);
  if (reply.is_discarded()) throw ContentError("endpoint returned invalid JSON");
  try {
    Completion c;
    c.text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
    if (auto usage = reply.find("usage"); usage != reply.end() && usage->is_object()) {
      c.usage.prompt_tokens = usage->value("prompt_tokens", std::size_t{0});
      c.usage.completion_tokens = usage->value("completion_tokens", std::size_t{0});
    }
    return c;
  } catch (const json::exception& e) {
    throw ContentError(std::string("unexpected completion shape: ") + e.what());
  }
}

std::chrono::milliseconds backoff_delay(const RetryPolicy& policy, std::size_t attempt) {
  if (attempt < 2) return std::chrono::milliseconds{0};
  auto delay = policy.initial_backoff;
  for (std::size_t i = 2; i < attempt && delay < policy.max_backoff; ++i) delay *= 2;
  return std::min(delay, policy.max_backoff);
}

LlmGateway::LlmGateway(std::shared_ptr<LlmBackend> backend, GatewayConfig config, Sleeper sleeper)
    : backend_(std::move(backend)),
      config_(std::move(config)),
      sleeper_(std::move(sleeper)),
      in_flight_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, config_.max_in_flight))) {
  if (!backend_) throw ConfigError("gateway needs a backend");
  if (config_.retry.max_attempts == 0) config_.retry.max_attempts = 1;
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

GenerationRequest LlmGateway::make_request(std::string rendered_text, std::string tag) const {
  GenerationRequest r;
  r.rendered_text = std::move(rendered_text);
  r.model_name = config_.model_name;
  r.temperature = config_.temperature;
  r.max_tokens = config_.max_tokens;
  r.request_tag = std::move(tag);
  return r;
}

GenerationResult LlmGateway::generate(const GenerationRequest& request) {
  if (request.rendered_text.empty()) throw ContentError("empty rendered_text");
  const auto started = std::chrono::steady_clock::now();
  for (std::size_t attempt = 1;; ++attempt) {
    if (attempt > 1) sleeper_(backoff_delay(config_.retry, attempt));
    try {
      in_flight_.acquire();
      Completion c;
      try {
        c = backend_->complete(request);
      } catch (...) {
        in_flight_.release();
        throw;
      }
      in_flight_.release();

      GenerationResult result;
      result.extracted_prompt = extract_optimized(c.text);
      result.raw_text = std::move(c.text);
      result.usage = c.usage;
      result.backend = backend_->kind();
      result.request_tag = request.request_tag;
      result.attempts = attempt;
      result.latency = std::chrono::duration_cast<std::chrono::milliseconds>(
          std::chrono::steady_clock::now() - started);
      return result;
    } catch (const TransportError& e) {
      if (attempt >= config_.retry.max_attempts) {
        throw TransportError(std::string(e.what()) + " (gave up after " + std::to_string(attempt) +
                             " attempts)");
      }
      spdlog::warn("generation {} attempt {} failed: {}", request.request_tag, attempt, e.what());
    }
  }
}

}  // namespace crpo
