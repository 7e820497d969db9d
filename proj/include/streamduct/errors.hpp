#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace streamduct {

/// Bad shapes, out-of-range ids, zero extents.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite activation or loss. `where` names the layer or stage.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(std::string where, const std::string& what)
      : std::runtime_error(what), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

/// Malformed text input; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Bad magic, unsupported version, unknown dtype.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A manifest entry points outside the data blob.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Metric asked for on an empty path or corpus.
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace streamduct
