#pragma once

#include <stdexcept>
#include <string>

namespace faircl {

// Invalid user input: bad config keys, malformed files, violated
// preconditions on caller-supplied values. The CLI maps these to exit 1.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failures during computation (non-finite loss, shape bugs). Exit 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

}  // namespace faircl
