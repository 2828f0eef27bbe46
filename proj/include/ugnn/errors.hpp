#pragma once

#include <stdexcept>
#include <string>

namespace ugnn {

// Invalid configuration: bad shapes, out-of-range counts, malformed plans.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A layer kind that a particular graph encoder does not handle.
class UnsupportedArchitecture : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Malformed input data or files (IDX, CSV, binary blobs, labels).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values produced during training or evaluation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward() on a state produced by a different forward().
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace ugnn
