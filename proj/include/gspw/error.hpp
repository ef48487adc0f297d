#pragma once

#include <stdexcept>
#include <string>

namespace gspw {

enum class ErrorCode {
  Format,
  UnsupportedVersion,
  Validation,
  Io,
  Config,
  DimensionMismatch,
  NoCandidate,
  AffinityUndefined,
  StaleIndex,
  ContractViolation,
  OutOfCorridor,
  Degenerate,
  Infeasible,
};

const char* to_string(ErrorCode code);

/// Library-wide exception. The code drives CLI exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace gspw
