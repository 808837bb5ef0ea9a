#pragma once

#include <stdexcept>
#include <string>

namespace crpo {

/// Base of every error raised by the library. `kind()` is a stable,
/// machine-readable tag that ends up in run manifests.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define CRPO_DEFINE_ERROR(Name)                                              \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& message) : Error(#Name, message) {}     \
  }

// corpus
CRPO_DEFINE_ERROR(FileNotFound);
CRPO_DEFINE_ERROR(EmptyCorpus);
CRPO_DEFINE_ERROR(UnknownId);
CRPO_DEFINE_ERROR(NoMatch);
CRPO_DEFINE_ERROR(CacheError);

// retrieval
CRPO_DEFINE_ERROR(KTooSmall);
CRPO_DEFINE_ERROR(EmptyQuery);
CRPO_DEFINE_ERROR(InsufficientCandidates);

// selection
CRPO_DEFINE_ERROR(TooFewCandidates);
CRPO_DEFINE_ERROR(EmptySet);

// prompting
CRPO_DEFINE_ERROR(EmptyTier);
CRPO_DEFINE_ERROR(MissingMetric);
CRPO_DEFINE_ERROR(MissingRetrieval);
CRPO_DEFINE_ERROR(TemplateError);

// llm gateway
CRPO_DEFINE_ERROR(TransportError);
CRPO_DEFINE_ERROR(AuthError);
CRPO_DEFINE_ERROR(ContextOverflow);
CRPO_DEFINE_ERROR(ContentError);

// evaluation
CRPO_DEFINE_ERROR(OutOfRange);
CRPO_DEFINE_ERROR(EvaluatorTransport);
CRPO_DEFINE_ERROR(EvaluatorSchema);

// runner
CRPO_DEFINE_ERROR(ConfigError);
CRPO_DEFINE_ERROR(FatalBackend);
CRPO_DEFINE_ERROR(IoError);

#undef CRPO_DEFINE_ERROR

}  // namespace crpo
