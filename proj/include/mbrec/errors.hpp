#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mbrec {

/// Base class for recoverable failures raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-supplied configuration (bad flag value, unknown behavior, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input text. Carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& reason)
      : Error("line " + std::to_string(line) + ": " + reason), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Data that cannot support the requested operation (empty test set, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a documented precondition (shape mismatch, index out of range).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace mbrec
