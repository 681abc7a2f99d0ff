#pragma once

#include <stdexcept>
#include <string>

namespace vpr {

enum class ErrorCode {
  InvalidArgument,
  Constraint,
  NonFinite,
  Parse,
  Io,
  BadMagic,
  BadVersion,
  Truncated,
  RankDeficient,
  StageMismatch,
};

const char* to_string(ErrorCode code);

/// Exception type used across the library. The code lets callers (notably the
/// CLI) map failures to exit statuses without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace vpr
