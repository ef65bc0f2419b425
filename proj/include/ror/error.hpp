#pragma once

#include <stdexcept>
#include <string>

namespace ror {

/// Invalid architecture/training configuration or incompatible shapes.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf produced by a primitive or a diverging loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File access or format problems.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChecksumError : public IoError {
 public:
  using IoError::IoError;
};

class VersionError : public IoError {
 public:
  using IoError::IoError;
};

/// Checkpoint tensor names do not match the model (missing or extra names).
class TensorNameError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace ror
