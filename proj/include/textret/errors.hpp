#pragma once

#include <stdexcept>
#include <string>

namespace textret {

/// Caller passed something outside an operation's domain (bad shape, unknown symbol, ...).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input is well-formed but numerically degenerate, e.g. a zero-norm vector under cosine.
class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a loss term turns non-finite; `term` names the offending component.
class TrainingFailure : public std::runtime_error {
 public:
  TrainingFailure(std::string term, const std::string& what)
      : std::runtime_error(what), term_(std::move(term)) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

}  // namespace textret
