#pragma once

#include <stdexcept>
#include <string>

namespace wpfuse {

/// Shape or size contract violated (odd dimensions, mismatched operands).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input values or parameters are not usable (non-finite, empty, malformed).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid NetworkConfig / TrainingConfig / run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training diverged or produced a non-finite quantity.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be read, written or parsed.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace wpfuse
