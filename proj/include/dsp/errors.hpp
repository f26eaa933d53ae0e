#pragma once

#include <stdexcept>
#include <string>

namespace dsp {

// Exception hierarchy. The CLI maps each family onto a process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration values or combinations (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a documented precondition or schema (exit code 2).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed input text; carries the 1-based line number when known.
class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : ValidationError(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Any failure talking to a generation backend (exit code 3).
class BackendError : public Error {
 public:
  using Error::Error;
};

class CredentialError : public BackendError {
 public:
  using BackendError::BackendError;
};

class BackendUnavailableError : public BackendError {
 public:
  using BackendError::BackendError;
};

class ProtocolError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// NaN/Inf encountered during optimization (exit code 4).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// 2 for config/validation errors, 3 for backend failures, 4 for numeric
/// aborts and 1 for anything else.
inline int exit_code(const std::exception& e) noexcept {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr || dynamic_cast<const ValidationError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const BackendError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return 4;
  return 1;
}

}  // namespace dsp
