#pragma once

#include <stdexcept>
#include <string>

namespace metassm {

/// Raised for malformed configuration, mismatched shapes or layouts, and bad files.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces non-finite values or fails to converge.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace metassm
