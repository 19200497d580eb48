#pragma once

#include <stdexcept>
#include <string>

namespace accent {

/// Shape mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid hyperparameter or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed data handed to an operation (empty sequence, blank in targets).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// File parse failure; the message carries the offending line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// CTC label sequence cannot be aligned to the available frames.
class InfeasibleError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Brute-force oracle refused an instance that is too large to enumerate.
class GuardError : public std::length_error {
 public:
  using std::length_error::length_error;
};

/// Pipeline misuse, e.g. a stage run without its prerequisite checkpoint.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace accent
