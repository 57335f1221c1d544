#pragma once

#include <stdexcept>
#include <string>

namespace gpm {

/// Broad failure categories. The CLI maps each one to its own exit status.
enum class ErrorKind {
  invalid_argument = 2,
  numeric_failure = 3,
  contract_violation = 4,
  not_ready = 5,
  parse_error = 6,
  data_error = 7,
  io_error = 8,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

  const char* category() const noexcept {
    switch (kind_) {
      case ErrorKind::invalid_argument: return "invalid-argument";
      case ErrorKind::numeric_failure: return "numeric-failure";
      case ErrorKind::contract_violation: return "contract-violation";
      case ErrorKind::not_ready: return "not-ready";
      case ErrorKind::parse_error: return "parse-error";
      case ErrorKind::data_error: return "data-error";
      case ErrorKind::io_error: return "io-error";
    }
    return "error";
  }

 private:
  ErrorKind kind_;
};

struct InvalidArgument : Error {
  explicit InvalidArgument(const std::string& w) : Error(ErrorKind::invalid_argument, w) {}
};
struct NumericFailure : Error {
  explicit NumericFailure(const std::string& w) : Error(ErrorKind::numeric_failure, w) {}
};
struct ContractViolation : Error {
  explicit ContractViolation(const std::string& w) : Error(ErrorKind::contract_violation, w) {}
};
struct NotReady : Error {
  explicit NotReady(const std::string& w) : Error(ErrorKind::not_ready, w) {}
};
struct ParseError : Error {
  explicit ParseError(const std::string& w) : Error(ErrorKind::parse_error, w) {}
};
struct DataError : Error {
  explicit DataError(const std::string& w) : Error(ErrorKind::data_error, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::io_error, w) {}
};

}  // namespace gpm
