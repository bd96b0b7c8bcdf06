#pragma once

#include <stdexcept>
#include <string>

namespace gdict {

// Bad user-supplied configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf or degenerate numerics mid-computation (CLI exit code 3).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Corrupt or unreadable files (CLI exit code 4).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace gdict
