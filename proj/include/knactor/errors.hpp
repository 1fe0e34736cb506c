#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace knactor {

// Error codes shared by the in-process engines, the wire protocol, and the
// expression evaluator. The string form is what travels in response envelopes.
enum class ErrorCode {
  SchemaInvalid,
  Conflict,
  InvalidState,
  AccessDenied,
  NotFound,
  InvalidUdf,
  InvalidRecord,
  InvalidPipeline,
  InvalidDiff,
  MissingBinding,
  TypeError,
  DivisionByZero,
  ParseError,
  InvalidRequest,
  Transport,
  Internal,
};

inline std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::SchemaInvalid: return "schema-invalid";
    case ErrorCode::Conflict: return "conflict";
    case ErrorCode::InvalidState: return "invalid-state";
    case ErrorCode::AccessDenied: return "access-denied";
    case ErrorCode::NotFound: return "not-found";
    case ErrorCode::InvalidUdf: return "invalid-udf";
    case ErrorCode::InvalidRecord: return "invalid-record";
    case ErrorCode::InvalidPipeline: return "invalid-pipeline";
    case ErrorCode::InvalidDiff: return "invalid-diff";
    case ErrorCode::MissingBinding: return "missing-binding";
    case ErrorCode::TypeError: return "type-error";
    case ErrorCode::DivisionByZero: return "division-by-zero";
    case ErrorCode::ParseError: return "parse-error";
    case ErrorCode::InvalidRequest: return "invalid-request";
    case ErrorCode::Transport: return "transport";
    case ErrorCode::Internal: return "internal";
  }
  return "internal";
}

inline ErrorCode error_code_from_string(std::string_view s) {
  if (s == "schema-invalid") return ErrorCode::SchemaInvalid;
  if (s == "conflict") return ErrorCode::Conflict;
  if (s == "invalid-state") return ErrorCode::InvalidState;
  if (s == "access-denied") return ErrorCode::AccessDenied;
  if (s == "not-found") return ErrorCode::NotFound;
  if (s == "invalid-udf") return ErrorCode::InvalidUdf;
  if (s == "invalid-record") return ErrorCode::InvalidRecord;
  if (s == "invalid-pipeline") return ErrorCode::InvalidPipeline;
  if (s == "invalid-diff") return ErrorCode::InvalidDiff;
  if (s == "missing-binding") return ErrorCode::MissingBinding;
  if (s == "type-error") return ErrorCode::TypeError;
  if (s == "division-by-zero") return ErrorCode::DivisionByZero;
  if (s == "parse-error") return ErrorCode::ParseError;
  if (s == "invalid-request") return ErrorCode::InvalidRequest;
  if (s == "transport") return ErrorCode::Transport;
  return ErrorCode::Internal;
}

class DxError : public std::runtime_error {
 public:
  DxError(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), message_(message) {}

  ErrorCode code() const { return code_; }
  const std::string& message() const { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

// Expression parse failures carry a source location.
class ParseError : public DxError {
 public:
  ParseError(const std::string& message, int line, int column)
      : DxError(ErrorCode::ParseError,
                message + " (line " + std::to_string(line) + ", column " + std::to_string(column) + ")"),
        line_(line),
        column_(column) {}

  int line() const { return line_; }
  int column() const { return column_; }

 private:
  int line_;
  int column_;
};

}  // namespace knactor
