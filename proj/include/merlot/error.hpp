#pragma once

#include <stdexcept>
#include <string>

namespace merlot {

// Shape/dimension mismatch between tensors.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// A precondition of an operation was violated (empty context set, non-scalar
// loss, out-of-range argument, ...).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration (unknown key, invalid flag combination, ...).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File format or filesystem failure.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace merlot
