#pragma once

#include <stdexcept>
#include <string>

namespace ospo {

// Error taxonomy shared by all modules. Codes map onto CLI exit codes:
// config -> 2, backend -> 3, validation -> 4.
enum class ErrorCode {
  Config,
  BackendUnavailable,
  RemoteRejected,
  Timeout,
  NotPerturbable,
  PoolExhausted,
  PoolTooSmall,
  TranscriptParse,
  BindingViolation,
  UnanswerableQuestion,
  NonFiniteLoss,
  ConfigMismatch,
  StageIncomplete,
  EmptyManifest,
  MismatchedQuestionSets,
  EmptyPrompt,
  NoCandidates,
  Internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define OSPO_DEFINE_ERROR(NAME, CODE)                                     \
  class NAME : public Error {                                             \
   public:                                                                \
    explicit NAME(const std::string& what) : Error(ErrorCode::CODE, what) {} \
  }

OSPO_DEFINE_ERROR(ConfigError, Config);
OSPO_DEFINE_ERROR(BackendUnavailable, BackendUnavailable);
OSPO_DEFINE_ERROR(RemoteRejected, RemoteRejected);
OSPO_DEFINE_ERROR(TimeoutError, Timeout);
OSPO_DEFINE_ERROR(NotPerturbable, NotPerturbable);
OSPO_DEFINE_ERROR(PoolExhausted, PoolExhausted);
OSPO_DEFINE_ERROR(PoolTooSmall, PoolTooSmall);
OSPO_DEFINE_ERROR(TranscriptParseError, TranscriptParse);
OSPO_DEFINE_ERROR(BindingViolation, BindingViolation);
OSPO_DEFINE_ERROR(UnanswerableQuestion, UnanswerableQuestion);
OSPO_DEFINE_ERROR(NonFiniteLoss, NonFiniteLoss);
OSPO_DEFINE_ERROR(ConfigMismatch, ConfigMismatch);
OSPO_DEFINE_ERROR(StageIncomplete, StageIncomplete);
OSPO_DEFINE_ERROR(EmptyManifest, EmptyManifest);
OSPO_DEFINE_ERROR(MismatchedQuestionSets, MismatchedQuestionSets);
OSPO_DEFINE_ERROR(EmptyPrompt, EmptyPrompt);
OSPO_DEFINE_ERROR(NoCandidates, NoCandidates);
OSPO_DEFINE_ERROR(InternalError, Internal);

#undef OSPO_DEFINE_ERROR

}  // namespace ospo
