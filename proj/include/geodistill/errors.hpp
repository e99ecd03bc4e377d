#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace geodistill {

/// Incompatible array shapes or an invalid reduction axis.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input outside an operator's mathematical domain (e.g. log of a non-positive value).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Invalid scalar hyperparameter such as a non-positive temperature.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptyInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Two depths compare equal where a strict ordering is required.
class TieError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Caller broke a cross-argument contract (mismatched masks, scene sets, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or truncated file. `offset()` is the byte position reported by the parser.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient encountered during optimization.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace geodistill
