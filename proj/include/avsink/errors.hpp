#pragma once
#include <stdexcept>
#include <string>

namespace avsink {

// Bad flags, config files or parameters (exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (exit code 3).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A runtime check of a stated invariant failed (exit code 4).
struct InvariantError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace avsink
