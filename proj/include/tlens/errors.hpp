#pragma once

#include <stdexcept>
#include <string>

namespace tlens {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed input text (bad JSON, wrong field type, bad header).
struct ParseError : Error {
  using Error::Error;
};

/// Well-formed input that breaks an invariant (duplicate ids, empty sets, ...).
struct ValidationError : Error {
  using Error::Error;
};

struct LookupError : Error {
  using Error::Error;
};

/// Tensor or vector dimension mismatch.
struct ShapeError : Error {
  using Error::Error;
};

/// Binary container problems; carries the byte offset where reading failed.
struct FormatError : Error {
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset(offset) {}
  std::size_t offset;
};

struct ArgumentError : Error {
  using Error::Error;
};

/// Sequence longer than the model context.
struct ContextLengthError : ArgumentError {
  using ArgumentError::ArgumentError;
};

/// Token id outside the vocabulary.
struct VocabularyError : ArgumentError {
  using ArgumentError::ArgumentError;
};

struct IoError : Error {
  using Error::Error;
};

/// Text with nothing to identify (empty, whitespace, no script-bearing characters).
struct NoSignalError : Error {
  using Error::Error;
};

}  // namespace tlens
