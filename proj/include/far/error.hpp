#pragma once

#include <stdexcept>
#include <string>

namespace far {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Bad caller-supplied data (labels, token ids, index sets, empty splits).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in the wrong lifecycle state.
class StateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (checkpoints, TSV corpora, result files).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or values during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Synthetic task parameters that cannot be satisfied.
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace far
