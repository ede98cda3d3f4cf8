#pragma once

#include <stdexcept>
#include <string>

namespace emq {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user-supplied configuration (bad grid, bad hyper-parameters).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss/gradient or a broken numeric invariant during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

// Unusable input data (empty file, non-numeric column, too few rows).
class DataError : public Error {
 public:
  using Error::Error;
};

// Corrupt or unreadable model container.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace emq
