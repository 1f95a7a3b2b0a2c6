#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace medlab {

enum class ErrorCode {
  // tensor store
  DuplicateTensor,
  ShapeMismatch,
  NotAnArchive,
  UnsupportedVersion,
  Truncated,
  UnsupportedDtype,
  // text pipeline
  InvalidVocab,
  InvalidRules,
  UnknownId,
  UnknownWord,
  // engine
  InvalidConfig,
  WeightMismatch,
  BadSite,
  NumericError,
  WrongFamily,
  TooShort,
  NoMaskToken,
  // mediation
  BadCandidate,
  BadPrompt,
  ResubstitutionError,
  PromptMismatch,
  EmptyReport,
  // bias metrics
  EmptyDataset,
  EmptyInput,
  ZeroNorm,
  ZeroVariance,
  UnequalSets,
  PermutationSpaceTooLarge,
  // cda
  InvalidLexicon,
  StreamError,
  // experiment
  ConfigError,
  SchemaError,
  IoError,
};

std::string_view to_string(ErrorCode code);

// All library failures surface as this exception; the code is the stable part.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace medlab
