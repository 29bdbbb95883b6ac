#pragma once

#include <stdexcept>
#include <string>

namespace msr {

/// Invalid or out-of-range experiment configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed, truncated or unreadable dataset / checkpoint bytes.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or parameters during training.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A conv filter whose direction tensor has collapsed to (near) zero magnitude.
struct DegenerateFilterError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace msr
