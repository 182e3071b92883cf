#pragma once

#include <stdexcept>
#include <string>

namespace prism {

// Precondition violated by a caller-supplied value (out-of-range value, empty
// batch, malformed config).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A policy or PRM backend failed. Carries the rollout index when raised from
// inside a search (-1 otherwise).
class BackendError : public std::runtime_error {
 public:
  explicit BackendError(const std::string& what, int rollout = -1)
      : std::runtime_error(what), rollout_(rollout) {}

  int rollout() const noexcept { return rollout_; }

 private:
  int rollout_;
};

// A backend reply could not be parsed. The raw body is kept for diagnostics.
class ParseError : public BackendError {
 public:
  ParseError(const std::string& what, std::string raw_body)
      : BackendError(what), raw_body_(std::move(raw_body)) {}

  const std::string& raw_body() const noexcept { return raw_body_; }

 private:
  std::string raw_body_;
};

// Dataset or checkpoint file violates its schema.
class SchemaError : public std::runtime_error {
 public:
  SchemaError(const std::string& what, std::size_t line)
      : std::runtime_error(what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace prism
