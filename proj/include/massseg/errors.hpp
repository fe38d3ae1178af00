#pragma once

#include <stdexcept>

namespace massseg {

/// Invalid model/block/run configuration (bad sizes, unknown names, shape mismatch between
/// a layer and its parameters).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Data that violates an operation's preconditions (empty foreground, mismatched masks, ...).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system or serialization failure. The message always names the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Optimization diverged (non-finite loss).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace massseg
