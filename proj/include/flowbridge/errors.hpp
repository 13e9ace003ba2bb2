#pragma once

#include <stdexcept>

namespace flowbridge {

// Error categories mirror the CLI exit codes: usage/config -> 2,
// data -> 3, numerical failure -> 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace flowbridge
