#pragma once

#include <stdexcept>
#include <string>

namespace rdcssl {

// Base for every error raised by the library. Subclasses exist so callers can
// tell configuration problems from numeric or I/O failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class SingularityError : public Error {
 public:
  SingularityError(const std::string& what, double condition_estimate)
      : Error(what), condition_estimate_(condition_estimate) {}
  double condition_estimate() const noexcept { return condition_estimate_; }

 private:
  double condition_estimate_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Raised when a vector that must be L2-normalized has zero (or non-finite) norm.
class NormalizationError : public NumericError {
 public:
  using NumericError::NumericError;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& what, std::string pointer = {})
      : Error(what), pointer_(std::move(pointer)) {}
  // JSON pointer to the offending config field, empty when not config-driven.
  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace rdcssl
