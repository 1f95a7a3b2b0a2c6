#include "medlab/error.hpp"

namespace medlab {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DuplicateTensor: return "DuplicateTensor";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NotAnArchive: return "NotAnArchive";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
    case ErrorCode::InvalidVocab: return "InvalidVocab";
    case ErrorCode::InvalidRules: return "InvalidRules";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::UnknownWord: return "UnknownWord";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::WeightMismatch: return "WeightMismatch";
    case ErrorCode::BadSite: return "BadSite";
    case ErrorCode::NumericError: return "NumericError";
    case ErrorCode::WrongFamily: return "WrongFamily";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::NoMaskToken: return "NoMaskToken";
    case ErrorCode::BadCandidate: return "BadCandidate";
    case ErrorCode::BadPrompt: return "BadPrompt";
    case ErrorCode::ResubstitutionError: return "ResubstitutionError";
    case ErrorCode::PromptMismatch: return "PromptMismatch";
    case ErrorCode::EmptyReport: return "EmptyReport";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ZeroNorm: return "ZeroNorm";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::UnequalSets: return "UnequalSets";
    case ErrorCode::PermutationSpaceTooLarge: return "PermutationSpaceTooLarge";
    case ErrorCode::InvalidLexicon: return "InvalidLexicon";
    case ErrorCode::StreamError: return "StreamError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace medlab
