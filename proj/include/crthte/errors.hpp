#pragma once

#include <stdexcept>
#include <string>

namespace crthte {

// Base for every error the library raises. Front ends map the subclasses to
// exit codes (CLI) and HTTP statuses (service).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inputs outside their domain. `field` names the offending input using the
// request vocabulary (e.g. "alpha_level", "outcome.icc") when known.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& message, std::string field = {})
      : Error(message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Design CSV or request text that cannot be parsed.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, int line = 0, int column = 0)
      : Error(message), line_(line), column_(column) {}
  int line() const noexcept { return line_; }
  int column() const noexcept { return column_; }

 private:
  int line_;
  int column_;
};

// A solve target that cannot be reached within the configured limits.
class InfeasibleError : public Error {
 public:
  InfeasibleError(const std::string& message, double asymptotic_power = -1.0)
      : Error(message), asymptotic_power_(asymptotic_power) {}
  // Power in the limit of the unbounded quantity; negative when not applicable.
  double asymptotic_power() const noexcept { return asymptotic_power_; }

 private:
  double asymptotic_power_;
};

// Problem size beyond the configured dimension cap.
class ResourceError : public Error {
 public:
  using Error::Error;
};

// The design cannot identify the requested coefficient.
class InestimableError : public Error {
 public:
  InestimableError(const std::string& message, std::string coordinate)
      : Error(message), coordinate_(std::move(coordinate)) {}
  const std::string& coordinate() const noexcept { return coordinate_; }

 private:
  std::string coordinate_;
};

}  // namespace crthte
