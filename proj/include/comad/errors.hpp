#pragma once

#include <stdexcept>
#include <string>

namespace comad {

// Exit codes used by the CLI: 0 success, 2 config error, 3 numeric error,
// 4 I/O error. Library code throws; only the CLI maps to exit codes.
class Error : public std::runtime_error {
public:
  Error(std::string msg, int exit_code)
      : std::runtime_error(std::move(msg)), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

private:
  int exit_code_;
};

// Invalid configuration: bad ratios, unknown variants, invalid dimensions.
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& msg) : Error(msg, 2) {}
};

// Shape disagreement between tensors. A species of misconfiguration.
class DimensionError : public ConfigError {
public:
  explicit DimensionError(const std::string& msg) : ConfigError(msg) {}
};

// A caller violated an operation's contract (non-binary mask, non-scalar
// loss, unnormalized probability vector).
class ContractError : public Error {
public:
  explicit ContractError(const std::string& msg) : Error(msg, 2) {}
};

// NaN/Inf emerged where finite values are required.
class NumericError : public Error {
public:
  explicit NumericError(const std::string& msg) : Error(msg, 3) {}
};

class IoError : public Error {
public:
  explicit IoError(const std::string& msg) : Error(msg, 4) {}
};

}  // namespace comad
