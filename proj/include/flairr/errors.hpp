#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace flairr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user configuration: unknown strategy, invalid knob values, bad flags.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or insufficient input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Transport or script failures from a completion backend.
class BackendError : public Error {
 public:
  using Error::Error;
};

// A template renders with an unresolved placeholder, or a library file is bad.
class TemplateError : public Error {
 public:
  using Error::Error;
};

enum class ParseErrorKind {
  missing_marker,
  unbalanced_bracket,
  non_numeric,
  count_mismatch,
  bad_boolean,
  placeholder,
  empty_body,
  grammar,
};

// An LLM reply that does not follow the requested output grammar. Always
// retryable: the orchestrator re-asks with a corrective suffix.
class ParseError : public Error {
 public:
  ParseError(ParseErrorKind kind, std::string message, std::string offending)
      : Error(std::move(message)), kind_(kind), offending_(std::move(offending)) {}

  ParseErrorKind kind() const noexcept { return kind_; }
  const std::string& offending() const noexcept { return offending_; }
  bool retryable() const noexcept { return true; }

 private:
  ParseErrorKind kind_;
  std::string offending_;
};

}  // namespace flairr
